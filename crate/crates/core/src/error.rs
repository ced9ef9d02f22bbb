use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid UTF-8 at byte {position}")]
    InvalidUtf8 { position: usize },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("unreadable payload for source {source_id}: {reason}")]
    Payload { source_id: String, reason: String },

    #[error("document {doc_id} references unknown source {source_id}")]
    DanglingSource { doc_id: String, source_id: String },

    #[error("license {license} of source {source_id} forbids export")]
    ExportForbidden { source_id: String, license: String },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("token id {id} at index {index} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: u32, index: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("loss: {0}")]
    Loss(String),

    #[error("shape mismatch for {path}: expected {expected}, got {got}")]
    Shape { path: String, expected: String, got: String },

    #[error("lora: {0}")]
    Lora(String),

    #[error("non-finite gradient at step {step} (parameter {path})")]
    NonFinite { step: usize, path: String },

    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },

    #[error("step {step} outside schedule [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("eval: {0}")]
    Eval(String),

    #[error("task sets differ; missing: {missing:?}")]
    TaskMismatch { missing: Vec<String> },

    #[error("grammar: {0}")]
    Grammar(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err: source,
        }
    }
}
