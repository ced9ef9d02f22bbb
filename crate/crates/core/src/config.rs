//! Run configuration file (TOML).
//!
//! ```toml
//! [model]      # vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len, norm_eps
//! [lora]       # rank, alpha, dropout_p, targets
//! [optim]      # base_lr, weight_decay, beta1, beta2, eps, clip_norm, warmup_ratio, lr_floor
//! [chunker]    # seq_len, stride, min_tail
//! [plan]       # b, a, d, seq_len
//! [train]      # epochs, val_fraction, segments, record_wall_clock, exec
//! [tokenizer]  # vocab_size
//! [paths]      # corpus_dir, runs_dir
//! [seeds]      # model, train, tokenizer, synth
//! [synth]      # spec, train_sentences, val_sentences, task_items
//! ```
//!
//! Every key is optional; unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BatchPlan, ChunkerConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lora::LoraConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::synth::BundleSizes;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub norm_eps: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
            norm_eps: m.norm_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub val_fraction: f64,
    pub segments: Option<usize>,
    pub record_wall_clock: bool,
    pub exec: Exec,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            val_fraction: t.val_fraction,
            segments: t.segments,
            record_wall_clock: t.record_wall_clock,
            exec: t.exec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { vocab_size: ModelConfig::default().vocab_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub runs_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { corpus_dir: "corpus".into(), runs_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub model: u64,
    pub train: u64,
    pub tokenizer: u64,
    pub synth: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Dialect spec file; the built-in spec when absent.
    pub spec: Option<PathBuf>,
    pub train_sentences: usize,
    pub val_sentences: usize,
    pub task_items: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = BundleSizes::default();
        SynthSection {
            spec: None,
            train_sentences: s.train_sentences,
            val_sentences: s.val_sentences,
            task_items: s.task_items,
        }
    }
}

impl SynthSection {
    pub fn sizes(&self) -> BundleSizes {
        BundleSizes {
            train_sentences: self.train_sentences,
            val_sentences: self.val_sentences,
            task_items: self.task_items,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub lora: LoraConfig,
    pub optim: OptimConfig,
    pub chunker: ChunkerConfig,
    pub plan: BatchPlan,
    pub train: TrainSection,
    pub tokenizer: TokenizerSection,
    pub paths: Paths,
    pub seeds: Seeds,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(origin, e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
            norm_eps: m.norm_eps,
            seed: self.seeds.model,
        }
    }

    pub fn train_config(&self, epochs: Option<usize>, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: epochs.unwrap_or(self.train.epochs),
            plan: self.plan,
            chunker: self.chunker,
            optim: self.optim.clone(),
            seed: self.seeds.train,
            val_fraction: self.train.val_fraction,
            checkpoint_dir,
            segments: self.train.segments,
            record_wall_clock: self.train.record_wall_clock,
            exec: self.train.exec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.lora.validate()?;
        self.optim.validate()?;
        self.train_config(None, None).validate()?;
        if self.plan.seq_len != self.chunker.seq_len {
            return Err(Error::config(
                "plan.seq_len",
                format!("{} differs from chunker.seq_len {}", self.plan.seq_len, self.chunker.seq_len),
            ));
        }
        if self.chunker.seq_len > self.model.max_seq_len {
            return Err(Error::config(
                "chunker.seq_len",
                format!("{} exceeds model.max_seq_len {}", self.chunker.seq_len, self.model.max_seq_len),
            ));
        }
        if self.tokenizer.vocab_size > self.model.vocab_size {
            return Err(Error::config(
                "tokenizer.vocab_size",
                format!("{} exceeds model.vocab_size {}", self.tokenizer.vocab_size, self.model.vocab_size),
            ));
        }
        if let Some(s) = self.train.segments {
            if s == 0 || s > self.model.n_layers {
                return Err(Error::config("train.segments", format!("{s} outside [1, {}]", self.model.n_layers)));
            }
        }
        Ok(())
    }
}
