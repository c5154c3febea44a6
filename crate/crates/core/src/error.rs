use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum CdnError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDivergence { step: u64, detail: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("missing split `{0}` in manifest")]
    MissingSplit(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, CdnError>;

impl CdnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdnError::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CdnError::InvalidInput(msg.into())
    }
}
