//! Synthetic prestige/dialect corpora and acceptability tasks.
//!
//! A [`DialectSpec`] is a small text file:
//!
//! ```text
//! # comments start with '#'
//! seed 7
//! start S
//! sentences_per_doc 6
//! lexicon le la un chat voiture dort .
//! S -> NP VP . @2 | NP dort .
//! NP -> le chat | la voiture
//! sub voiture char 0.8          # lexical substitution, '+' joins output words
//! ortho oi oé 0.5               # first occurrence of a substring inside a word
//! contract je+suis chu 0.8      # word sequence to one word
//! switch anyway 0.05            # insert a word after any non-final word
//! corrupt agree le la           # swap either member of the pair
//! corrupt lexeme dort dors      # replace one word by a wrong one
//! corrupt swap                  # exchange two adjacent words
//! ```
//!
//! Rule lines hold `|`-separated alternatives, each with an optional `@weight`
//! (default 1). Every terminal must appear in a `lexicon` line. Transforms run
//! in file order over each prestige sentence.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{corpus_hash, write_documents, CleanDocument};
use crate::data::{chunk_documents, tokenize_documents, ChunkerConfig};
use crate::error::{Error, Result};
use crate::eval::{delta_report, evaluate_task, write_tasks, EvalReport, Group, TaskItem, TaskKind, TaskSpec};
use crate::exec::Exec;
use crate::lora::LoraConfig;
use crate::model::{init_model, load_model, ModelConfig};
use crate::tokenizer::{train_tokenizer, Vocab};
use crate::trainer::{pretrain, run_cpt, PerplexityTrace, TrainConfig, TrainData, TrainOutcome};

const MAX_DEPTH: usize = 64;

const STREAM_GRAMMAR: u64 = 1;
const STREAM_TRANSFORM: u64 = 2;
const STREAM_TASK: u64 = 3;
const STREAM_CORRUPT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Prestige,
    Dialect,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Prestige => "prestige",
            Variant::Dialect => "dialect",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    pub start: String,
    pub rules: BTreeMap<String, Vec<(Vec<String>, f64)>>,
    pub lexicon: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Substitute { from: String, to: Vec<String>, p: f64 },
    Orthographic { from: String, to: String, p: f64 },
    Contract { from: Vec<String>, to: String, p: f64 },
    CodeSwitch { word: String, p: f64 },
}

impl Transform {
    pub fn prob(&self) -> f64 {
        match self {
            Transform::Substitute { p, .. }
            | Transform::Orthographic { p, .. }
            | Transform::Contract { p, .. }
            | Transform::CodeSwitch { p, .. } => *p,
        }
    }

    fn set_prob(&mut self, q: f64) {
        match self {
            Transform::Substitute { p, .. }
            | Transform::Orthographic { p, .. }
            | Transform::Contract { p, .. }
            | Transform::CodeSwitch { p, .. } => *p = q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Corruption {
    Agreement(String, String),
    Swap,
    Lexeme(String, String),
}

impl Corruption {
    /// Number of positions one application can change.
    pub fn window(&self) -> usize {
        match self {
            Corruption::Swap => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialectSpec {
    pub grammar: Grammar,
    pub transforms: Vec<Transform>,
    pub corruptions: Vec<Corruption>,
    pub seed: u64,
    pub sentences_per_doc: usize,
}

fn grammar_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Grammar(format!("line {line}: {msg}"))
}

fn parse_prob(s: &str, line: usize) -> Result<f64> {
    let p: f64 = s.parse().map_err(|_| grammar_err(line, format!("bad probability {s:?}")))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(grammar_err(line, format!("probability {p} outside [0, 1]")));
    }
    Ok(p)
}

fn words(s: &str) -> Vec<String> {
    s.split('+').map(str::to_string).collect()
}

impl FromStr for DialectSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut seed = 0;
        let mut start = None;
        let mut per_doc = 8;
        let mut lexicon = BTreeSet::new();
        let mut rules: BTreeMap<String, Vec<(Vec<String>, f64)>> = BTreeMap::new();
        let mut transforms = Vec::new();
        let mut corruptions = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some((lhs, rhs)) = content.split_once("->") {
                let lhs = lhs.trim();
                if lhs.is_empty() || lhs.contains(char::is_whitespace) {
                    return Err(grammar_err(line, format!("bad rule head {lhs:?}")));
                }
                let alts = rules.entry(lhs.to_string()).or_default();
                for alt in rhs.split('|') {
                    let mut syms: Vec<String> = alt.split_whitespace().map(str::to_string).collect();
                    let mut weight = 1.0;
                    if let Some(w) = syms.last().and_then(|s| s.strip_prefix('@')) {
                        weight = w.parse().map_err(|_| grammar_err(line, format!("bad weight {w:?}")))?;
                        syms.pop();
                    }
                    if !(weight > 0.0 && f64::is_finite(weight)) {
                        return Err(grammar_err(line, "weights must be positive"));
                    }
                    if syms.is_empty() {
                        return Err(grammar_err(line, "empty alternative"));
                    }
                    alts.push((syms, weight));
                }
                continue;
            }
            let f: Vec<&str> = content.split_whitespace().collect();
            let arity = |n: usize| -> Result<()> {
                if f.len() == n {
                    Ok(())
                } else {
                    Err(grammar_err(line, format!("{} expects {} fields", f[0], n - 1)))
                }
            };
            match f[0] {
                "seed" => {
                    arity(2)?;
                    seed = f[1].parse().map_err(|_| grammar_err(line, "bad seed"))?;
                }
                "start" => {
                    arity(2)?;
                    start = Some(f[1].to_string());
                }
                "sentences_per_doc" => {
                    arity(2)?;
                    per_doc = f[1].parse().map_err(|_| grammar_err(line, "bad sentences_per_doc"))?;
                    if per_doc == 0 {
                        return Err(grammar_err(line, "sentences_per_doc must be >= 1"));
                    }
                }
                "lexicon" => lexicon.extend(f[1..].iter().map(|s| s.to_string())),
                "sub" => {
                    arity(4)?;
                    transforms.push(Transform::Substitute {
                        from: f[1].to_string(),
                        to: words(f[2]),
                        p: parse_prob(f[3], line)?,
                    });
                }
                "ortho" => {
                    arity(4)?;
                    transforms.push(Transform::Orthographic {
                        from: f[1].to_string(),
                        to: f[2].to_string(),
                        p: parse_prob(f[3], line)?,
                    });
                }
                "contract" => {
                    arity(4)?;
                    transforms.push(Transform::Contract {
                        from: words(f[1]),
                        to: f[2].to_string(),
                        p: parse_prob(f[3], line)?,
                    });
                }
                "switch" => {
                    arity(3)?;
                    transforms.push(Transform::CodeSwitch { word: f[1].to_string(), p: parse_prob(f[2], line)? });
                }
                "corrupt" => match f.get(1).copied() {
                    Some("agree") => {
                        arity(4)?;
                        corruptions.push(Corruption::Agreement(f[2].to_string(), f[3].to_string()));
                    }
                    Some("lexeme") => {
                        arity(4)?;
                        corruptions.push(Corruption::Lexeme(f[2].to_string(), f[3].to_string()));
                    }
                    Some("swap") => {
                        arity(2)?;
                        corruptions.push(Corruption::Swap);
                    }
                    other => return Err(grammar_err(line, format!("unknown corruption {other:?}"))),
                },
                other => return Err(grammar_err(line, format!("unknown directive {other:?}"))),
            }
        }
        let start = start.ok_or_else(|| Error::Grammar("no start symbol declared".into()))?;
        let spec = DialectSpec {
            grammar: Grammar { start, rules, lexicon },
            transforms,
            corruptions,
            seed,
            sentences_per_doc: per_doc,
        };
        spec.grammar.validate()?;
        Ok(spec)
    }
}

impl Grammar {
    pub fn validate(&self) -> Result<()> {
        if !self.rules.contains_key(&self.start) {
            return Err(Error::Grammar(format!("start symbol {} has no rules", self.start)));
        }
        for (lhs, alts) in &self.rules {
            if self.lexicon.contains(lhs) {
                return Err(Error::Grammar(format!("{lhs} is both a nonterminal and a word")));
            }
            for (syms, _) in alts {
                if let Some(s) = syms.iter().find(|s| !self.rules.contains_key(*s) && !self.lexicon.contains(*s)) {
                    return Err(Error::Grammar(format!("{s} in a rule for {lhs} is neither a nonterminal nor in the lexicon")));
                }
            }
        }
        // Symbols that can finish in a finite number of expansions.
        let mut done: HashSet<&str> = HashSet::new();
        loop {
            let before = done.len();
            for (lhs, alts) in &self.rules {
                if !done.contains(lhs.as_str())
                    && alts
                        .iter()
                        .any(|(syms, _)| syms.iter().all(|s| self.lexicon.contains(s) || done.contains(s.as_str())))
                {
                    done.insert(lhs);
                }
            }
            if done.len() == before {
                break;
            }
        }
        if !done.contains(self.start.as_str()) {
            return Err(Error::Grammar(format!("start symbol {} derives no finite sentence", self.start)));
        }
        Ok(())
    }

    /// One sentence as a word list.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = vec![(self.start.as_str(), 0usize)];
        while let Some((sym, depth)) = stack.pop() {
            let Some(alts) = self.rules.get(sym) else {
                out.push(sym.to_string());
                continue;
            };
            if depth >= MAX_DEPTH {
                return Err(Error::Grammar(format!("expansion deeper than {MAX_DEPTH} at {sym}")));
            }
            let total: f64 = alts.iter().map(|a| a.1).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = alts.len() - 1;
            for (k, (_, w)) in alts.iter().enumerate() {
                if u < *w {
                    pick = k;
                    break;
                }
                u -= w;
            }
            for s in alts[pick].0.iter().rev() {
                stack.push((s.as_str(), depth + 1));
            }
        }
        Ok(out)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ stream.rotate_left(40)) ^ index as u64))
}

impl DialectSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    /// The example spec shipped with the crate.
    pub fn standard() -> Self {
        STANDARD_SPEC.parse().expect("built-in spec parses")
    }

    /// Copy with every transform probability set to `p`.
    pub fn with_transform_prob(&self, p: f64) -> Self {
        let mut s = self.clone();
        s.transforms.iter_mut().for_each(|t| t.set_prob(p));
        s
    }

    pub fn mean_transform_prob(&self) -> f64 {
        if self.transforms.is_empty() {
            return 0.0;
        }
        self.transforms.iter().map(Transform::prob).sum::<f64>() / self.transforms.len() as f64
    }

    pub fn corruption_window(&self) -> usize {
        self.corruptions.iter().map(Corruption::window).max().unwrap_or(0)
    }

    /// Apply every transform in order; each eligible site fires with its
    /// probability.
    pub fn transform(&self, words: &[String], rng: &mut impl Rng) -> Vec<String> {
        let mut cur = words.to_vec();
        for t in &self.transforms {
            let mut next = Vec::with_capacity(cur.len() + 2);
            match t {
                Transform::Substitute { from, to, p } => {
                    for w in cur {
                        if &w == from && rng.random_bool(*p) {
                            next.extend(to.iter().cloned());
                        } else {
                            next.push(w);
                        }
                    }
                }
                Transform::Orthographic { from, to, p } => {
                    for w in cur {
                        if w.contains(from.as_str()) && rng.random_bool(*p) {
                            next.push(w.replacen(from.as_str(), to, 1));
                        } else {
                            next.push(w);
                        }
                    }
                }
                Transform::Contract { from, to, p } => {
                    let mut i = 0;
                    while i < cur.len() {
                        if cur[i..].starts_with(from) && rng.random_bool(*p) {
                            next.push(to.clone());
                            i += from.len();
                        } else {
                            next.push(cur[i].clone());
                            i += 1;
                        }
                    }
                }
                Transform::CodeSwitch { word, p } => {
                    let n = cur.len();
                    for (i, w) in cur.into_iter().enumerate() {
                        next.push(w);
                        if i + 1 < n && rng.random_bool(*p) {
                            next.push(word.clone());
                        }
                    }
                }
            }
            cur = next;
        }
        cur
    }

    fn sentence(&self, seed: u64, grammar_stream: u64, transform_stream: u64, i: usize, variant: Variant) -> Result<Vec<String>> {
        let words = self.grammar.sample(&mut stream_rng(seed, grammar_stream, i))?;
        Ok(match variant {
            Variant::Prestige => words,
            Variant::Dialect => self.transform(&words, &mut stream_rng(seed, transform_stream, i)),
        })
    }

    /// Sentence `i` of the paired corpora, as word lists.
    pub fn sentence_pair(&self, i: usize) -> Result<(Vec<String>, Vec<String>)> {
        let p = self.grammar.sample(&mut stream_rng(self.seed, STREAM_GRAMMAR, i))?;
        let d = self.transform(&p, &mut stream_rng(self.seed, STREAM_TRANSFORM, i));
        Ok((p, d))
    }

    /// Every site where a corruption applies, as (rule, position).
    fn corruption_sites(&self, words: &[String]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (r, c) in self.corruptions.iter().enumerate() {
            match c {
                Corruption::Agreement(a, b) => {
                    out.extend(words.iter().enumerate().filter(|(_, w)| *w == a || *w == b).map(|(i, _)| (r, i)));
                }
                Corruption::Lexeme(from, _) => {
                    out.extend(words.iter().enumerate().filter(|(_, w)| *w == from).map(|(i, _)| (r, i)));
                }
                Corruption::Swap => {
                    let wordy = |w: &String| w.chars().any(char::is_alphabetic);
                    for i in 0..words.len().saturating_sub(1) {
                        if words[i] != words[i + 1] && wordy(&words[i]) && wordy(&words[i + 1]) {
                            out.push((r, i));
                        }
                    }
                }
            }
        }
        out
    }

    /// A corrupted copy of `words`, or `None` when no corruption applies.
    pub fn corrupt(&self, words: &[String], rng: &mut impl Rng) -> Option<Vec<String>> {
        let sites = self.corruption_sites(words);
        if sites.is_empty() {
            return None;
        }
        let (r, i) = sites[rng.random_range(0..sites.len())];
        let mut out = words.to_vec();
        match &self.corruptions[r] {
            Corruption::Agreement(a, b) => out[i] = if &out[i] == a { b.clone() } else { a.clone() },
            Corruption::Lexeme(_, to) => out[i] = to.clone(),
            Corruption::Swap => out.swap(i, i + 1),
        }
        Some(out)
    }
}

fn join(words: &[String]) -> String {
    words.join(" ")
}

fn documents(sentences: &[String], per_doc: usize, prefix: &str, source: &str) -> Vec<CleanDocument> {
    sentences
        .chunks(per_doc)
        .enumerate()
        .map(|(k, s)| CleanDocument::new(format!("{prefix}-{k:05}"), source, s.join("\n")))
        .collect()
}

fn source_id(variant: Variant) -> String {
    format!("synth_{}", variant.as_str())
}

/// `n_sentences` seeded sentences grouped into documents. Sentence `i` of the
/// dialect corpus is the transformed sentence `i` of the prestige corpus.
pub fn gen_corpus(spec: &DialectSpec, n_sentences: usize, variant: Variant) -> Result<Vec<CleanDocument>> {
    if n_sentences == 0 {
        return Err(Error::config("synth.n_sentences", "must be >= 1"));
    }
    spec.grammar.validate()?;
    let sentences = Exec::default()
        .map_range(n_sentences, |i| {
            spec.sentence(spec.seed, STREAM_GRAMMAR, STREAM_TRANSFORM, i, variant).map(|w| join(&w))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(documents(&sentences, spec.sentences_per_doc, variant.as_str(), &source_id(variant)))
}

fn task_items(spec: &DialectSpec, n_items: usize, seed: u64, variant: Variant) -> Result<Vec<TaskItem>> {
    if n_items == 0 {
        return Err(Error::config("synth.task_items", "must be >= 1"));
    }
    if spec.corruptions.is_empty() {
        return Err(Error::Grammar("no corruption rules defined".into()));
    }
    let task_seed = splitmix(spec.seed ^ splitmix(seed));
    let mut items = Vec::with_capacity(n_items);
    let max_tries = 50 * n_items + 100;
    for j in 0..max_tries {
        if items.len() == n_items {
            break;
        }
        let good = spec.sentence(task_seed, STREAM_TASK, STREAM_TRANSFORM, j, variant)?;
        let mut rng = stream_rng(task_seed, STREAM_CORRUPT, j);
        let Some(bad) = spec.corrupt(&good, &mut rng) else { continue };
        let gold = usize::from(rng.random_bool(0.5));
        let (a, b) = if gold == 0 { (join(&good), join(&bad)) } else { (join(&bad), join(&good)) };
        items.push(TaskItem { slots: [("a".to_string(), a), ("b".to_string(), b)].into(), gold });
    }
    if items.len() < n_items {
        return Err(Error::Grammar(format!(
            "corruption rules apply too rarely: {} of {n_items} items after {max_tries} sentences",
            items.len()
        )));
    }
    Ok(items)
}

fn acceptability_task(spec: &DialectSpec, n_items: usize, seed: u64, variant: Variant) -> Result<TaskSpec> {
    let task = TaskSpec {
        name: format!("{}_acceptability", variant.as_str()),
        kind: TaskKind::Binary,
        group: match variant {
            Variant::Dialect => Group::Dialect,
            Variant::Prestige => Group::Prestige,
        },
        prompt_template: String::new(),
        verbalizers: vec!["{a}".into(), "{b}".into()],
        items: task_items(spec, n_items, seed, variant)?,
    };
    task.validate()?;
    Ok(task)
}

/// Pairs of a grammatical dialect sentence and a copy with one corruption;
/// gold is the grammatical member, its position drawn from the seed.
pub fn make_acceptability_task(spec: &DialectSpec, n_items: usize, seed: u64) -> Result<TaskSpec> {
    acceptability_task(spec, n_items, seed, Variant::Dialect)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSizes {
    pub train_sentences: usize,
    pub val_sentences: usize,
    pub task_items: usize,
}

impl Default for BundleSizes {
    fn default() -> Self {
        BundleSizes { train_sentences: 2000, val_sentences: 200, task_items: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub prestige_train: Vec<CleanDocument>,
    pub prestige_val: Vec<CleanDocument>,
    pub dialect_train: Vec<CleanDocument>,
    pub dialect_val: Vec<CleanDocument>,
    pub acceptability_task: TaskSpec,
    /// The same construction without transforms, for retention.
    pub prestige_task: TaskSpec,
}

impl SynthBundle {
    /// Paired corpora with validation sentences that occur in neither
    /// training corpus.
    pub fn generate(spec: &DialectSpec, sizes: BundleSizes, task_seed: u64) -> Result<Self> {
        if sizes.train_sentences == 0 || sizes.val_sentences == 0 {
            return Err(Error::config("synth.sizes", "train and val sentence counts must be >= 1"));
        }
        spec.grammar.validate()?;
        let n = sizes.train_sentences;
        let pairs = Exec::default()
            .map_range(n, |i| spec.sentence_pair(i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let (pt, dt): (Vec<String>, Vec<String>) = pairs.iter().map(|(p, d)| (join(p), join(d))).unzip();
        let seen_p: HashSet<&str> = pt.iter().map(String::as_str).collect();
        let seen_d: HashSet<&str> = dt.iter().map(String::as_str).collect();
        let (mut pv, mut dv) = (Vec::new(), Vec::new());
        let max_tries = 20 * sizes.val_sentences + 1000;
        let mut i = n;
        while pv.len() < sizes.val_sentences {
            if i - n >= max_tries {
                return Err(Error::Grammar(format!(
                    "grammar too small: only {} held-out sentences after {max_tries} draws",
                    pv.len()
                )));
            }
            let (p, d) = spec.sentence_pair(i)?;
            let (p, d) = (join(&p), join(&d));
            if !seen_p.contains(p.as_str()) && !seen_d.contains(d.as_str()) {
                pv.push(p);
                dv.push(d);
            }
            i += 1;
        }
        let k = spec.sentences_per_doc;
        let (ps, ds) = (source_id(Variant::Prestige), source_id(Variant::Dialect));
        Ok(SynthBundle {
            prestige_train: documents(&pt, k, "prestige-train", &ps),
            prestige_val: documents(&pv, k, "prestige-val", &ps),
            dialect_train: documents(&dt, k, "dialect-train", &ds),
            dialect_val: documents(&dv, k, "dialect-val", &ds),
            acceptability_task: acceptability_task(spec, sizes.task_items, task_seed, Variant::Dialect)?,
            prestige_task: acceptability_task(spec, sizes.task_items, task_seed, Variant::Prestige)?,
        })
    }

    /// Byte-level BPE over both training corpora.
    pub fn train_tokenizer(&self, vocab_size: usize) -> Result<Vocab> {
        let docs = self.prestige_train.iter().chain(&self.dialect_train).map(|d| d.text.as_str());
        train_tokenizer(docs, vocab_size, 0)
    }

    /// Corpora as JSON lines plus the tasks and their registry.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, docs) in [
            ("prestige_train", &self.prestige_train),
            ("prestige_val", &self.prestige_val),
            ("dialect_train", &self.dialect_train),
            ("dialect_val", &self.dialect_val),
        ] {
            write_documents(&dir.join(format!("{name}.jsonl")), docs)?;
        }
        write_tasks(&dir.join("tasks"), &[self.acceptability_task.clone(), self.prestige_task.clone()])
    }
}

fn chunks_of(docs: &[CleanDocument], vocab: &Vocab, chunker: &ChunkerConfig, exec: Exec) -> Vec<crate::data::Chunk> {
    chunk_documents(&tokenize_documents(docs, vocab, exec), chunker, exec)
}

/// Full-parameter pre-training on the prestige corpus, selected on the
/// prestige validation split.
pub fn pretrain_base(bundle: &SynthBundle, vocab: &Vocab, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if model.vocab_size < vocab.vocab_size() {
        return Err(Error::config(
            "model.vocab_size",
            format!("{} is below the tokenizer's {}", model.vocab_size, vocab.vocab_size()),
        ));
    }
    let data = TrainData {
        train: chunks_of(&bundle.prestige_train, vocab, &cfg.chunker, cfg.exec),
        dialect_val: chunks_of(&bundle.prestige_val, vocab, &cfg.chunker, cfg.exec),
        prestige_val: Vec::new(),
        tokenizer_hash: Some(vocab.hash()),
        corpus_hash: Some(corpus_hash(&bundle.prestige_train)),
    };
    pretrain(&init_model(model)?, &data, cfg)
}

#[derive(Debug, Clone)]
pub struct DynamicsResult {
    pub trace: PerplexityTrace,
    pub report: EvalReport,
    pub outcome: TrainOutcome,
}

/// LoRA continual pre-training of the saved base on the dialect corpus,
/// tracing both validation splits each epoch and scoring both
/// acceptability tasks before and after.
pub fn run_dynamics_experiment(
    bundle: &SynthBundle,
    base_checkpoint: &Path,
    vocab: &Vocab,
    lora: &LoraConfig,
    cfg: &TrainConfig,
) -> Result<DynamicsResult> {
    if !base_checkpoint.exists() {
        return Err(Error::config("synth.base_checkpoint", format!("{} does not exist", base_checkpoint.display())));
    }
    let base = load_model(base_checkpoint)?;
    let data = TrainData {
        train: chunks_of(&bundle.dialect_train, vocab, &cfg.chunker, cfg.exec),
        dialect_val: chunks_of(&bundle.dialect_val, vocab, &cfg.chunker, cfg.exec),
        prestige_val: chunks_of(&bundle.prestige_val, vocab, &cfg.chunker, cfg.exec),
        tokenizer_hash: Some(vocab.hash()),
        corpus_hash: Some(corpus_hash(&bundle.dialect_train)),
    };
    let outcome = run_cpt(&base, lora, &data, cfg)?;
    let tasks = [&bundle.acceptability_task, &bundle.prestige_task];
    let score = |state: &crate::model::ModelState| -> Result<BTreeMap<String, f64>> {
        let w = state.weights::<f32>();
        tasks
            .iter()
            .map(|t| Ok((t.name.clone(), 100.0 * evaluate_task(&w, vocab, t, cfg.exec)?.macro_f1)))
            .collect()
    };
    let before = score(&base)?;
    let after = score(&outcome.selected)?;
    let grouping: Vec<(Group, Vec<String>)> = tasks.iter().map(|t| (t.group, vec![t.name.clone()])).collect();
    let report = delta_report(&before, &after, &grouping)?;
    Ok(DynamicsResult { trace: outcome.trace.clone(), report, outcome })
}

/// Text summary of a dynamics run.
pub fn render_dynamics(result: &DynamicsResult) -> String {
    use crate::trainer::Split;
    let mut out = String::from("epoch  ppl_dialect  ppl_prestige\n");
    let d = result.trace.series(Split::DialectVal);
    let p = result.trace.series(Split::PrestigeVal);
    for (e, x) in d.iter().enumerate() {
        let y = p.get(e).map(|v| format!("{v:.3}")).unwrap_or_else(|| "--".into());
        let _ = writeln!(out, "{e:>5}  {x:>11.3}  {y:>12}");
    }
    for t in &result.report.tasks {
        let _ = writeln!(
            out,
            "{} ({}): {:.2} -> {:.2} ({})",
            t.task,
            t.group.as_str(),
            t.base,
            t.adapted,
            crate::eval::fmt_delta(t.delta)
        );
    }
    out
}

pub const STANDARD_SPEC: &str = include_str!("../data/standard.dialect");
