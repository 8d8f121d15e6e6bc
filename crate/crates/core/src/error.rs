use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid spacing {0:?}: every component must be > 0")]
    InvalidSpacing([f64; 3]),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no valid patch placement for patch {patch:?} in volume {shape:?}")]
    NoValidPlacement { shape: [usize; 3], patch: [usize; 3] },
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
