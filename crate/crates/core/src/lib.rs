//! Parameter-efficient continual pre-training at desk scale: corpus
//! cleaning and accounting, byte-level BPE, overlapping chunking, a micro
//! decoder with hand-written gradients, LoRA adapters, AdamW, and
//! likelihood-based evaluation.

pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod synth;
pub mod exec;
pub mod lora;
pub mod model;
pub mod optim;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
