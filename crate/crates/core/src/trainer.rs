//! Training loops: full-parameter pre-training and LoRA continual
//! pre-training with accumulation, simulated shards, per-epoch validation
//! and checkpoint selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{build_epoch, chunk_documents, split_documents, BatchPlan, Chunk, ChunkerConfig, TokenizedDoc};
use crate::error::{Error, Result};
use crate::exec::{pairwise_sum, Exec};
use crate::lora::{attach, save_adapters, LoraConfig};
use crate::model::{dropout_key, save_model, ActivationMeter, GradSet, ModelState, Weights};
use crate::optim::{adamw_step, clip_global_norm, lr_at, OptimConfig, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub plan: BatchPlan,
    pub chunker: ChunkerConfig,
    /// `total_steps` is overwritten with the run's horizon.
    pub optim: OptimConfig,
    pub seed: u64,
    pub val_fraction: f64,
    /// Where per-epoch checkpoints, metrics and the run manifest go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpointed layer blocks; `None` picks `round(sqrt(n_layers))`.
    pub segments: Option<usize>,
    /// Fill the `wall_clock_s` metrics column. Off by default so metrics
    /// files are reproducible byte for byte.
    pub record_wall_clock: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            plan: BatchPlan::default(),
            chunker: ChunkerConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            val_fraction: 0.05,
            checkpoint_dir: None,
            segments: None,
            record_wall_clock: false,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::config("train.val_fraction", "must be in (0, 0.5)"));
        }
        self.plan.validate()?;
        self.chunker.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    DialectVal,
    PrestigeVal,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::DialectVal => "dialect_val",
            Split::PrestigeVal => "prestige_val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub split: Split,
    pub perplexity: f64,
}

/// Per-epoch perplexity per split, epoch 0 being the model before training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerplexityTrace {
    pub entries: Vec<TraceEntry>,
}

impl PerplexityTrace {
    pub fn get(&self, epoch: usize, split: Split) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.epoch == epoch && e.split == split)
            .map(|e| e.perplexity)
    }

    pub fn series(&self, split: Split) -> Vec<f64> {
        let mut v: Vec<_> = self.entries.iter().filter(|e| e.split == split).collect();
        v.sort_by_key(|e| e.epoch);
        v.into_iter().map(|e| e.perplexity).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,perplexity\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.split.as_str(), e.perplexity);
        }
        out
    }
}

/// One line of the metrics file. Step rows carry optimizer fields; epoch
/// rows carry validation fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: Option<f64>,
    pub train_loss: Option<f64>,
    pub grad_norm_pre_clip: Option<f64>,
    pub val_loss: Option<f64>,
    pub ppl_dialect: Option<f64>,
    pub ppl_prestige: Option<f64>,
    pub wall_clock_s: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,step,lr,train_loss,grad_norm_pre_clip,val_loss,ppl_dialect,ppl_prestige,wall_clock_s";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            cell(r.lr),
            cell(r.train_loss),
            cell(r.grad_norm_pre_clip),
            cell(r.val_loss),
            cell(r.ppl_dialect),
            cell(r.ppl_prestige),
            cell(r.wall_clock_s)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub perplexity: BTreeMap<String, f64>,
    pub checkpoint: Option<String>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audits {
    pub no_replay: bool,
    pub base_immutable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: String,
    pub train: TrainConfig,
    pub model: crate::model::ModelConfig,
    pub lora: Option<LoraConfig>,
    pub tokenizer_hash: Option<String>,
    pub corpus_hash: Option<String>,
    pub base_fingerprint: String,
    pub n_train_chunks: usize,
    pub n_val_chunks: BTreeMap<String, usize>,
    pub total_steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub selected_checkpoint: Option<String>,
    pub audits: Audits,
}

/// Training and validation chunks plus input fingerprints.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<Chunk>,
    /// Validation for the adapted distribution; drives selection.
    pub dialect_val: Vec<Chunk>,
    /// Optional retention split, traced but never used for selection.
    pub prestige_val: Vec<Chunk>,
    pub tokenizer_hash: Option<String>,
    pub corpus_hash: Option<String>,
}

impl TrainData {
    /// Seeded document-level split of `docs` into train and validation,
    /// then chunking. `prestige` documents, if any, are chunked whole as the
    /// retention split.
    pub fn from_documents(
        docs: &[TokenizedDoc],
        prestige: &[TokenizedDoc],
        cfg: &TrainConfig,
    ) -> Result<TrainData> {
        cfg.validate()?;
        let (train_docs, val_docs) = split_documents(docs, cfg.val_fraction, cfg.seed);
        if val_docs.is_empty() {
            return Err(Error::config("train.val_fraction", "validation split is empty"));
        }
        let train = chunk_documents(&train_docs, &cfg.chunker, cfg.exec);
        let dialect_val = chunk_documents(&val_docs, &cfg.chunker, cfg.exec);
        let prestige_val = chunk_documents(prestige, &cfg.chunker, cfg.exec);
        Ok(TrainData { train, dialect_val, prestige_val, ..Default::default() })
    }
}

/// Per-micro-batch mean loss and mean gradient over `n_seqs` sequences.
#[derive(Debug, Clone)]
pub struct MicroBatch {
    pub n_seqs: usize,
    pub loss: f64,
    pub grads: GradSet,
}

/// Combine `shards[j][i]` (device `j`, accumulation step `i`) into the mean
/// per-sequence loss and gradient. Each shard accumulates its micro-batches,
/// then shards are averaged, as in synchronous data parallelism. Micro-batch
/// and shard means are weighted by sequence count, which reduces to plain
/// arithmetic means when every micro-batch holds `b` sequences.
pub fn accumulate_step(shards: &[Vec<MicroBatch>]) -> Result<(f64, GradSet)> {
    let first = shards
        .iter()
        .flat_map(|s| s.iter())
        .next()
        .ok_or_else(|| Error::Shape { path: "micro-batches".into(), expected: ">= 1".into(), got: "0".into() })?;
    let reference: Vec<(&String, usize)> = first.grads.entries.iter().map(|(k, v)| (k, v.len())).collect();
    let mut shard_means = Vec::new();
    for shard in shards.iter().filter(|s| !s.is_empty()) {
        let mut n = 0usize;
        let mut loss = 0.0;
        let mut acc: BTreeMap<String, Vec<f64>> =
            reference.iter().map(|(k, len)| ((*k).clone(), vec![0.0; *len])).collect();
        for mb in shard {
            let shape: Vec<(&String, usize)> = mb.grads.entries.iter().map(|(k, v)| (k, v.len())).collect();
            if shape != reference {
                return Err(Error::Shape {
                    path: "micro-batch grads".into(),
                    expected: format!("{reference:?}"),
                    got: format!("{shape:?}"),
                });
            }
            let w = mb.n_seqs as f64;
            n += mb.n_seqs;
            loss += w * mb.loss;
            for (k, g) in &mb.grads.entries {
                let a = acc.get_mut(k).expect("same keys");
                a.iter_mut().zip(g).for_each(|(x, y)| *x += w * y);
            }
        }
        let inv = 1.0 / n as f64;
        acc.values_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= inv));
        shard_means.push((n, loss * inv, acc));
    }
    let total: usize = shard_means.iter().map(|s| s.0).sum();
    let mut out: BTreeMap<String, Vec<f64>> =
        reference.iter().map(|(k, len)| ((*k).clone(), vec![0.0; *len])).collect();
    let mut loss = 0.0;
    for (n, l, g) in &shard_means {
        let w = *n as f64 / total as f64;
        loss += w * l;
        for (k, v) in g {
            out.get_mut(k).unwrap().iter_mut().zip(v).for_each(|(x, y)| *x += w * y);
        }
    }
    Ok((loss, GradSet { entries: out }))
}

/// Total masked NLL (nats) and scored-token count. With `overlap_mask`, each
/// non-initial chunk only scores tokens past the overlap.
pub fn masked_nll(
    w: &Weights<f32>,
    chunks: &[Chunk],
    chunker: &ChunkerConfig,
    overlap_mask: bool,
    exec: Exec,
) -> Result<(f64, usize)> {
    let parts = exec.map(chunks, |c| -> Result<(f64, usize)> {
        if c.ids.len() < 2 {
            return Ok((0.0, 0));
        }
        let lp = w.token_logprobs(&c.ids)?;
        let mask = if overlap_mask { c.eval_mask(chunker) } else { vec![true; lp.len()] };
        let mut sum = 0.0f64;
        let mut n = 0;
        for (l, m) in lp.iter().zip(mask) {
            if m {
                sum -= f64::from(*l);
                n += 1;
            }
        }
        Ok((sum, n))
    });
    let parts: Vec<(f64, usize)> = parts.into_iter().collect::<Result<_>>()?;
    let sums: Vec<f64> = parts.iter().map(|p| p.0).collect();
    Ok((pairwise_sum(&sums), parts.iter().map(|p| p.1).sum()))
}

/// `exp(mean masked NLL)` over `chunks`.
pub fn perplexity(state: &ModelState, chunks: &[Chunk], chunker: &ChunkerConfig, overlap_mask: bool) -> Result<f64> {
    perplexity_w(&state.weights(), chunks, chunker, overlap_mask, Exec::Parallel)
}

pub fn perplexity_w(
    w: &Weights<f32>,
    chunks: &[Chunk],
    chunker: &ChunkerConfig,
    overlap_mask: bool,
    exec: Exec,
) -> Result<f64> {
    let (nll, n) = masked_nll(w, chunks, chunker, overlap_mask, exec)?;
    if n == 0 {
        return Err(Error::Loss("no scored tokens".into()));
    }
    Ok((nll / n as f64).exp())
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the selected (lowest validation loss) epoch.
    pub selected: ModelState,
    pub last: ModelState,
    pub checkpoints: Vec<PathBuf>,
    pub trace: PerplexityTrace,
    pub manifest: RunManifest,
    pub metrics: Vec<MetricsRow>,
}

fn auto_segments(n_layers: usize) -> usize {
    ((n_layers as f64).sqrt().round() as usize).clamp(1, n_layers)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Gradient of one micro-batch: per-sequence gradients (in parallel) summed
/// in order and divided by the sequence count.
fn micro_batch(
    w: &Weights<f32>,
    state: &ModelState,
    seqs: &[(usize, &[u32])],
    dropout_seed: Option<(u64, usize, usize)>,
    segments: usize,
    exec: Exec,
) -> Result<MicroBatch> {
    let results = exec.map(seqs, |&(pos, ids)| {
        let key = dropout_seed.map(|(s, e, k)| dropout_key(s, e, k, pos));
        w.grad(ids, None, key, Some(segments), &mut ActivationMeter::new())
    });
    let n = seqs.len();
    let mut loss = 0.0;
    let mut sum: Option<Vec<Option<Vec<f64>>>> = None;
    for r in results {
        let (l, g) = r?;
        loss += f64::from(l);
        match &mut sum {
            None => {
                sum = Some(
                    g.into_iter()
                        .map(|v| v.map(|v| v.into_iter().map(f64::from).collect()))
                        .collect(),
                )
            }
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    if let (Some(a), Some(b)) = (a.as_mut(), b) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += f64::from(y));
                    }
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    let mut grads = GradSet::from_indexed(state, sum.expect("non-empty micro-batch"));
    grads.scale(inv);
    Ok(MicroBatch { n_seqs: n, loss: loss * inv, grads })
}

enum Mode {
    Pretrain,
    Cpt(LoraConfig),
}

/// Full-parameter training of every trainable tensor of `init`.
pub fn pretrain(init: &ModelState, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(init.clone(), Mode::Pretrain, data, cfg)
}

/// Attach LoRA to `base` and train only the adapters.
pub fn run_cpt(base: &ModelState, lora: &LoraConfig, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let state = attach(base, lora, cfg.seed)?;
    run(state, Mode::Cpt(lora.clone()), data, cfg)
}

fn run(mut state: ModelState, mode: Mode, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("train", "no training chunks"));
    }
    if data.dialect_val.is_empty() {
        return Err(Error::config("train.val_fraction", "validation split is empty"));
    }
    let mcfg = *state.config();
    let longest = data
        .train
        .iter()
        .chain(&data.dialect_val)
        .chain(&data.prestige_val)
        .map(|c| c.ids.len())
        .max()
        .unwrap_or(0);
    if longest > mcfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: longest, max: mcfg.max_seq_len });
    }
    let segments = cfg.segments.unwrap_or_else(|| auto_segments(mcfg.n_layers));
    if segments == 0 || segments > mcfg.n_layers {
        return Err(Error::config("train.segments", format!("{segments} outside [1, {}]", mcfg.n_layers)));
    }
    let spe = cfg.plan.steps_per_epoch(data.train.len());
    let total_steps = spe * cfg.epochs;
    let optim = OptimConfig { total_steps, ..cfg.optim.clone() };
    optim.validate()?;
    let dir = cfg.checkpoint_dir.clone();
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let (mode_name, lora_cfg) = match &mode {
        Mode::Pretrain => ("pretrain", None),
        Mode::Cpt(l) => ("cpt", Some(l.clone())),
    };
    let base_fp = state.frozen_fingerprint();
    let mut opt = OptimState::new(&state);
    let mut trace = PerplexityTrace::default();
    let mut metrics = Vec::new();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut no_replay = true;
    let clock = Instant::now();

    let has_prestige = !data.prestige_val.is_empty();
    let evaluate = |state: &ModelState| -> Result<(f64, f64, Option<f64>)> {
        let w = state.weights::<f32>();
        let (nll, n) = masked_nll(&w, &data.dialect_val, &cfg.chunker, true, cfg.exec)?;
        if n == 0 {
            return Err(Error::Loss("validation chunks score no tokens".into()));
        }
        let val_loss = nll / n as f64;
        let prestige = if has_prestige {
            Some(perplexity_w(&w, &data.prestige_val, &cfg.chunker, true, cfg.exec)?)
        } else {
            None
        };
        Ok((val_loss, val_loss.exp(), prestige))
    };

    let record = |epoch: usize,
                  val: (f64, f64, Option<f64>),
                  trace: &mut PerplexityTrace,
                  metrics: &mut Vec<MetricsRow>,
                  step: usize,
                  train_loss: Option<f64>,
                  secs: f64| {
        trace.entries.push(TraceEntry { epoch, split: Split::DialectVal, perplexity: val.1 });
        if let Some(p) = val.2 {
            trace.entries.push(TraceEntry { epoch, split: Split::PrestigeVal, perplexity: p });
        }
        metrics.push(MetricsRow {
            epoch,
            step,
            train_loss,
            val_loss: Some(val.0),
            ppl_dialect: Some(val.1),
            ppl_prestige: val.2,
            wall_clock_s: cfg.record_wall_clock.then_some(secs),
            ..Default::default()
        });
    };

    let v0 = evaluate(&state)?;
    record(0, v0, &mut trace, &mut metrics, 0, None, 0.0);
    let mut perp0 = BTreeMap::new();
    perp0.insert(Split::DialectVal.as_str().to_string(), v0.1);
    if let Some(p) = v0.2 {
        perp0.insert(Split::PrestigeVal.as_str().to_string(), p);
    }
    epochs.push(EpochRecord {
        epoch: 0,
        steps: 0,
        train_loss: None,
        val_loss: v0.0,
        perplexity: perp0,
        checkpoint: None,
        wall_clock_s: 0.0,
    });

    let per_step = cfg.plan.sequences_per_step();
    let mut global_step = 0usize;
    let mut best: Option<(f64, usize, ModelState)> = None;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let order = build_epoch(data.train.len(), epoch_seed(cfg.seed, epoch));
        let mut seen = vec![0u32; data.train.len()];
        let mut losses = Vec::with_capacity(spe);
        for (k, window) in order.chunks(per_step).enumerate() {
            window.iter().for_each(|&i| seen[i] += 1);
            let w = state.weights::<f32>();
            let seqs: Vec<(usize, &[u32])> =
                window.iter().enumerate().map(|(pos, &i)| (pos, data.train[i].ids.as_slice())).collect();
            let dropout = match mode {
                Mode::Cpt(_) => Some((cfg.seed, epoch, k)),
                Mode::Pretrain => None,
            };
            let shard_len = cfg.plan.a * cfg.plan.b;
            let mut shards = Vec::with_capacity(cfg.plan.d);
            for shard in seqs.chunks(shard_len) {
                let mut micros = Vec::with_capacity(cfg.plan.a);
                for mb in shard.chunks(cfg.plan.b) {
                    micros.push(micro_batch(&w, &state, mb, dropout, segments, cfg.exec)?);
                }
                shards.push(micros);
            }
            let (loss, mut grads) = accumulate_step(&shards)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { step: global_step });
            }
            let pre_norm = clip_global_norm(&mut grads, optim.clip_norm, global_step)?;
            let lr = lr_at(global_step, &optim)?;
            adamw_step(&mut state, &grads, &mut opt, lr, &optim)?;
            global_step += 1;
            losses.push(loss);
            metrics.push(MetricsRow {
                epoch,
                step: global_step,
                lr: Some(lr),
                train_loss: Some(loss),
                grad_norm_pre_clip: Some(pre_norm),
                ..Default::default()
            });
            log::debug!("epoch {epoch} step {global_step} loss {loss:.4} lr {lr:.3e} gnorm {pre_norm:.3}");
        }
        no_replay &= seen.iter().all(|&c| c == 1);

        let val = evaluate(&state)?;
        let train_loss = pairwise_sum(&losses) / losses.len() as f64;
        let secs = t0.elapsed().as_secs_f64();
        record(epoch, val, &mut trace, &mut metrics, global_step, Some(train_loss), secs);
        let checkpoint = match &dir {
            Some(d) => {
                let path = match mode {
                    Mode::Cpt(_) => {
                        let p = d.join(format!("adapter_epoch{epoch}.pcpt"));
                        save_adapters(&state, &p)?;
                        p
                    }
                    Mode::Pretrain => {
                        let p = d.join(format!("model_epoch{epoch}.pcpt"));
                        save_model(&state, &p)?;
                        p
                    }
                };
                checkpoints.push(path.clone());
                Some(path.file_name().unwrap().to_string_lossy().into_owned())
            }
            None => None,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4} val {:.4} ppl {:.3}{}",
            val.0,
            val.1,
            val.2.map(|p| format!(" prestige {p:.3}")).unwrap_or_default()
        );
        let mut perp = BTreeMap::new();
        perp.insert(Split::DialectVal.as_str().to_string(), val.1);
        if let Some(p) = val.2 {
            perp.insert(Split::PrestigeVal.as_str().to_string(), p);
        }
        epochs.push(EpochRecord {
            epoch,
            steps: losses.len(),
            train_loss: Some(train_loss),
            val_loss: val.0,
            perplexity: perp,
            checkpoint,
            wall_clock_s: secs,
        });
        if best.as_ref().is_none_or(|b| val.0 < b.0) {
            best = Some((val.0, epoch, state.clone()));
        }
    }
    if let Some(d) = &dir {
        opt.save(&d.join("optimizer.pcpt"))?;
    }
    log::info!("trained {global_step} steps in {:.1}s", clock.elapsed().as_secs_f64());

    let (_, selected_epoch, selected) = best.expect("epochs >= 1");
    let manifest = RunManifest {
        mode: mode_name.into(),
        train: TrainConfig { optim: optim.clone(), ..cfg.clone() },
        model: mcfg,
        lora: lora_cfg,
        tokenizer_hash: data.tokenizer_hash.clone(),
        corpus_hash: data.corpus_hash.clone(),
        base_fingerprint: base_fp.clone(),
        n_train_chunks: data.train.len(),
        n_val_chunks: [
            (Split::DialectVal.as_str().to_string(), data.dialect_val.len()),
            (Split::PrestigeVal.as_str().to_string(), data.prestige_val.len()),
        ]
        .into_iter()
        .collect(),
        total_steps,
        selected_checkpoint: epochs[selected_epoch].checkpoint.clone(),
        epochs,
        selected_epoch,
        audits: Audits { no_replay, base_immutable: state.frozen_fingerprint() == base_fp },
    };
    if let Some(d) = &dir {
        write_text(&d.join("metrics.csv"), &metrics_csv(&metrics))?;
        write_text(&d.join("trace.csv"), &trace.to_csv())?;
        write_text(&d.join("run_manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(TrainOutcome { selected, last: state, checkpoints, trace, manifest, metrics })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mb(n: usize, loss: f64, g: &[f64]) -> MicroBatch {
        let mut grads = GradSet::default();
        grads.entries.insert("w".into(), g.to_vec());
        MicroBatch { n_seqs: n, loss, grads }
    }

    #[test]
    fn single_micro_batch_is_identity() {
        let (l, g) = accumulate_step(&[vec![mb(2, 1.5, &[0.25, -3.0])]]).unwrap();
        assert_eq!(l, 1.5);
        assert_eq!(g.get("w").unwrap(), &[0.25, -3.0]);
    }

    #[test]
    fn opposite_grads_cancel() {
        let (_, g) = accumulate_step(&[vec![mb(1, 0.0, &[1.0, -2.0]), mb(1, 0.0, &[-1.0, 2.0])]]).unwrap();
        assert_eq!(g.get("w").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shards_average() {
        let (l, g) = accumulate_step(&[vec![mb(2, 1.0, &[1.0])], vec![mb(2, 3.0, &[3.0])]]).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g.get("w").unwrap(), &[2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(accumulate_step(&[vec![mb(1, 0.0, &[1.0]), mb(1, 0.0, &[1.0, 2.0])]]).is_err());
        assert!(accumulate_step(&[]).is_err());
    }

    #[test]
    fn metrics_header_and_blanks() {
        let csv = metrics_csv(&[MetricsRow { epoch: 1, step: 2, lr: Some(0.5), ..Default::default() }]);
        assert_eq!(csv.lines().nth(1).unwrap(), "1,2,0.5,,,,,,");
        assert!(csv.starts_with(METRICS_HEADER));
    }
}
