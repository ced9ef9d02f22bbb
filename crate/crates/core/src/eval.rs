//! Likelihood-based scoring of classification tasks, macro-F1, delta
//! reports and label statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::clean_text;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Weights;
use crate::tokenizer::{Vocab, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Dialect,
    Prestige,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Dialect => "dialect",
            Group::Prestige => "prestige",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "n")]
pub enum TaskKind {
    Binary,
    MultiChoice(usize),
}

impl TaskKind {
    pub fn n_classes(self) -> usize {
        match self {
            TaskKind::Binary => 2,
            TaskKind::MultiChoice(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub slots: BTreeMap<String, String>,
    pub gold: usize,
}

/// A classification task. The prompt template and each verbalizer may hold
/// `{slot}` placeholders filled from the item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub group: Group,
    pub prompt_template: String,
    pub verbalizers: Vec<String>,
    pub items: Vec<TaskItem>,
}

impl TaskSpec {
    pub fn n_classes(&self) -> usize {
        self.kind.n_classes()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_classes();
        if n < 2 {
            return Err(Error::Eval(format!("task {}: need at least 2 labels", self.name)));
        }
        if self.verbalizers.len() != n {
            return Err(Error::Eval(format!(
                "task {}: {} verbalizers for {n} labels",
                self.name,
                self.verbalizers.len()
            )));
        }
        if let Some(i) = self.items.iter().position(|it| it.gold >= n) {
            return Err(Error::Eval(format!("task {}: item {i} has gold label outside 0..{n}", self.name)));
        }
        Ok(())
    }

    pub fn prompt(&self, item: &TaskItem) -> Result<String> {
        fill(&self.prompt_template, &item.slots)
    }

    pub fn answer(&self, item: &TaskItem, label: usize) -> Result<String> {
        fill(&self.verbalizers[label], &item.slots)
    }
}

/// Substitute `{name}` placeholders. `{{` and `}}` are literal braces.
pub fn fill(template: &str, slots: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find(['{', '}']) {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('}') {
            return Err(Error::Eval(format!("unmatched '}}' in template {template:?}")));
        }
        let end = tail
            .find('}')
            .ok_or_else(|| Error::Eval(format!("unterminated slot in template {template:?}")))?;
        let name = &tail[1..end];
        let value = slots
            .get(name)
            .ok_or_else(|| Error::Eval(format!("slot {{{name}}} has no value")))?;
        out.push_str(value);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Anything that can give next-token log-probabilities for a sequence.
pub trait LogProbModel: Sync {
    /// `out[t] = log p(ids[t+1] | ids[..=t])`, length `T - 1`.
    fn token_logprobs(&self, ids: &[u32]) -> Result<Vec<f64>>;
    fn max_len(&self) -> usize;
}

impl LogProbModel for Weights<f32> {
    fn token_logprobs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        Ok(Weights::token_logprobs(self, ids)?.into_iter().map(f64::from).collect())
    }

    fn max_len(&self) -> usize {
        self.config().max_seq_len
    }
}

/// Mean log-likelihood per answer token given `BOS + prompt`. The prompt is
/// cleaned first; when the sequence is too long the prompt loses tokens
/// from the left.
pub fn score_choice<M: LogProbModel + ?Sized>(model: &M, vocab: &Vocab, prompt: &str, answer: &str) -> Result<f64> {
    let answer_ids = vocab.encode(answer);
    if answer_ids.is_empty() {
        return Err(Error::Eval(format!("answer {answer:?} encodes to no tokens")));
    }
    let mut ctx = vec![BOS];
    ctx.extend(vocab.encode(&clean_text(prompt)));
    let room = model.max_len().saturating_sub(answer_ids.len());
    if room == 0 {
        return Err(Error::Eval(format!("answer of {} tokens leaves no room for context", answer_ids.len())));
    }
    if ctx.len() > room {
        ctx.drain(..ctx.len() - room);
    }
    let n_ctx = ctx.len();
    ctx.extend_from_slice(&answer_ids);
    let lp = model.token_logprobs(&ctx)?;
    let total: f64 = lp[n_ctx - 1..].iter().sum();
    Ok(total / answer_ids.len() as f64)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn choice_scores<M: LogProbModel + ?Sized>(
    model: &M,
    vocab: &Vocab,
    task: &TaskSpec,
    item: &TaskItem,
) -> Result<Vec<f64>> {
    let prompt = task.prompt(item)?;
    (0..task.n_classes())
        .map(|label| score_choice(model, vocab, &prompt, &task.answer(item, label)?))
        .collect()
}

pub fn predict<M: LogProbModel + ?Sized>(model: &M, vocab: &Vocab, task: &TaskSpec, item: &TaskItem) -> Result<usize> {
    task.validate()?;
    Ok(argmax_first(&choice_scores(model, vocab, task, item)?))
}

/// Unweighted mean of per-class F1; a class with no predicted and no gold
/// members scores 0.
pub fn macro_f1(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Eval("macro-F1 of an empty set".into()));
    }
    if preds.len() != golds.len() {
        return Err(Error::Eval(format!("{} predictions for {} golds", preds.len(), golds.len())));
    }
    if n_classes == 0 || preds.iter().chain(golds).any(|&l| l >= n_classes) {
        return Err(Error::Eval(format!("labels must be below {n_classes}")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let sum: f64 = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / n_classes as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub name: String,
    pub group: Group,
    pub macro_f1: f64,
    pub preds: Vec<usize>,
    pub golds: Vec<usize>,
}

/// Predict every item (in parallel under `exec`) and score macro-F1.
pub fn evaluate_task<M: LogProbModel + ?Sized>(model: &M, vocab: &Vocab, task: &TaskSpec, exec: Exec) -> Result<TaskResult> {
    task.validate()?;
    let preds = exec
        .map(&task.items, |item| choice_scores(model, vocab, task, item).map(|s| argmax_first(&s)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<usize> = task.items.iter().map(|i| i.gold).collect();
    Ok(TaskResult {
        name: task.name.clone(),
        group: task.group,
        macro_f1: macro_f1(&preds, &golds, task.n_classes())?,
        preds,
        golds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: String,
    pub group: Group,
    pub base: f64,
    pub adapted: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskDelta>,
    pub avg_delta: BTreeMap<Group, f64>,
}

impl EvalReport {
    pub fn delta(&self, task: &str) -> Option<f64> {
        self.tasks.iter().find(|t| t.task == task).map(|t| t.delta)
    }
}

/// Per-task `adapted - base` and per-group mean, in the scores' own units.
/// `grouping` lists each group's tasks in display order.
pub fn delta_report(
    base: &BTreeMap<String, f64>,
    adapted: &BTreeMap<String, f64>,
    grouping: &[(Group, Vec<String>)],
) -> Result<EvalReport> {
    let wanted: BTreeSet<&String> = grouping.iter().flat_map(|(_, ts)| ts).collect();
    let mut missing: Vec<String> = Vec::new();
    for t in &wanted {
        if !base.contains_key(*t) {
            missing.push(format!("{t} (base)"));
        }
        if !adapted.contains_key(*t) {
            missing.push(format!("{t} (adapted)"));
        }
    }
    for t in base.keys().chain(adapted.keys()) {
        if !wanted.contains(t) && !missing.contains(t) {
            missing.push(t.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::TaskMismatch { missing });
    }
    let mut tasks = Vec::new();
    let mut avg_delta = BTreeMap::new();
    for (group, names) in grouping {
        let mut sum = 0.0;
        for t in names {
            let delta = adapted[t] - base[t];
            sum += delta;
            tasks.push(TaskDelta { task: t.clone(), group: *group, base: base[t], adapted: adapted[t], delta });
        }
        if !names.is_empty() {
            avg_delta.insert(*group, sum / names.len() as f64);
        }
    }
    Ok(EvalReport { tasks, avg_delta })
}

/// Signed two-decimal rendering; zero prints without a sign.
pub fn fmt_delta(x: f64) -> String {
    let s = format!("{x:+.2}");
    if s == "+0.00" || s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

/// Percentage of gold labels per class.
pub fn label_freq(task: &TaskSpec) -> Result<Vec<f64>> {
    if task.items.is_empty() {
        return Err(Error::Eval(format!("task {} has no items", task.name)));
    }
    let mut counts = vec![0usize; task.n_classes()];
    for it in &task.items {
        *counts
            .get_mut(it.gold)
            .ok_or_else(|| Error::Eval(format!("gold {} out of range", it.gold)))? += 1;
    }
    let n = task.items.len() as f64;
    Ok(counts.into_iter().map(|c| 100.0 * c as f64 / n).collect())
}

/// Percentage with two decimals, trimmed to one when the second is zero.
pub fn fmt_percent(x: f64) -> String {
    let s = format!("{x:.2}");
    match s.strip_suffix('0') {
        Some(t) => t.to_string(),
        None => s,
    }
}

pub fn render_label_freq(tasks: &[(&str, Vec<f64>)]) -> String {
    let rows = tasks.iter().map(|(_, f)| f.len()).max().unwrap_or(0);
    let mut out = format!("{:<6}", "Label");
    for (name, _) in tasks {
        let _ = write!(out, " {name:>9}");
    }
    out.push('\n');
    for r in 0..rows {
        let _ = write!(out, "{r:<6}");
        for (_, f) in tasks {
            let cell = f.get(r).map(|&x| fmt_percent(x)).unwrap_or_else(|| "--".into());
            let _ = write!(out, " {cell:>9}");
        }
        out.push('\n');
    }
    out
}

/// Scores of several model families in a delta-table layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub groups: BTreeMap<Group, Vec<String>>,
    pub families: Vec<Family>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub family: String,
    pub base: String,
    pub models: Vec<ModelScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub name: String,
    pub scores: BTreeMap<String, f64>,
}

impl ScoreTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn grouping(&self) -> Vec<(Group, Vec<String>)> {
        self.groups.iter().map(|(g, ts)| (*g, ts.clone())).collect()
    }

    /// Delta report of every non-base model against its family's base.
    pub fn reports(&self) -> Result<Vec<(String, String, EvalReport)>> {
        let grouping = self.grouping();
        let mut out = Vec::new();
        for f in &self.families {
            let base = f
                .models
                .iter()
                .find(|m| m.name == f.base)
                .ok_or_else(|| Error::Eval(format!("family {}: base model {} not listed", f.family, f.base)))?;
            for m in f.models.iter().filter(|m| m.name != f.base) {
                out.push((f.family.clone(), m.name.clone(), delta_report(&base.scores, &m.scores, &grouping)?));
            }
        }
        Ok(out)
    }

    /// One text table per group: macro-F1 and delta per task, then the
    /// group's average delta.
    pub fn render(&self) -> Result<String> {
        let reports = self.reports()?;
        let mut out = String::new();
        for (group, tasks) in &self.groups {
            let width = self
                .families
                .iter()
                .flat_map(|f| f.models.iter().map(|m| m.name.len()))
                .max()
                .unwrap_or(5)
                .max(5);
            let _ = writeln!(out, "[{}]", group.as_str());
            let _ = write!(out, "{:<width$}", "Model");
            for t in tasks {
                let _ = write!(out, " | {t:>16}");
            }
            let _ = writeln!(out, " | {:>8}", "avg dF1");
            let _ = write!(out, "{:<width$}", "");
            for _ in tasks {
                let _ = write!(out, " | {:>7} {:>8}", "macroF1", "dF1");
            }
            let _ = writeln!(out, " | {:>8}", "");
            for f in &self.families {
                let _ = writeln!(out, "{}", f.family);
                for m in &f.models {
                    let rep = reports.iter().find(|r| r.0 == f.family && r.1 == m.name).map(|r| &r.2);
                    let _ = write!(out, "{:<width$}", m.name);
                    for t in tasks {
                        let score = m.scores.get(t).map(|s| format!("{s:.2}")).unwrap_or_else(|| "--".into());
                        let delta = rep
                            .and_then(|r| r.delta(t))
                            .map(fmt_delta)
                            .unwrap_or_else(|| "--".into());
                        let _ = write!(out, " | {score:>7} {delta:>8}");
                    }
                    let avg = rep
                        .and_then(|r| r.avg_delta.get(group))
                        .map(|&a| fmt_delta(a))
                        .unwrap_or_else(|| "--".into());
                    let _ = writeln!(out, " | {avg:>8}");
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Registry entry for a task stored as JSON lines next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub kind: TaskKind,
    pub group: Group,
    pub template: String,
    pub verbalizers: Vec<String>,
    pub items: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRegistry {
    #[serde(default, rename = "task")]
    pub tasks: Vec<TaskEntry>,
}

/// Write each task's items to `<dir>/<name>.jsonl` and the registry to
/// `<dir>/tasks.toml`.
pub fn write_tasks(dir: &Path, tasks: &[TaskSpec]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut reg = TaskRegistry::default();
    for t in tasks {
        let file = format!("{}.jsonl", t.name);
        let mut body = String::new();
        for it in &t.items {
            body.push_str(&serde_json::to_string(it)?);
            body.push('\n');
        }
        let path = dir.join(&file);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        reg.tasks.push(TaskEntry {
            name: t.name.clone(),
            kind: t.kind,
            group: t.group,
            template: t.prompt_template.clone(),
            verbalizers: t.verbalizers.clone(),
            items: file,
        });
    }
    let text = toml::to_string(&reg).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("tasks.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_tasks(registry: &Path) -> Result<Vec<TaskSpec>> {
    let text = fs::read_to_string(registry).map_err(|e| Error::io(registry, e))?;
    let reg: TaskRegistry =
        toml::from_str(&text).map_err(|e| Error::config(registry.display().to_string(), e.to_string()))?;
    let base = registry.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for e in reg.tasks {
        let path = base.join(&e.items);
        let body = fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
        let items = body
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<TaskItem>, _>>()?;
        let task = TaskSpec {
            name: e.name,
            kind: e.kind,
            group: e.group,
            prompt_template: e.template,
            verbalizers: e.verbalizers,
            items,
        };
        task.validate()?;
        out.push(task);
    }
    Ok(out)
}
