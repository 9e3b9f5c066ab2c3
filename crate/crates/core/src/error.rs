use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("index out of range: component {value} >= dim {dim} in mode {mode}")]
    IndexOutOfRange { mode: usize, value: usize, dim: usize },

    #[error("duplicate index {index:?}")]
    DuplicateIndex { index: Vec<usize> },

    #[error("zero space too small: need {needed} cells, only {available} available")]
    ZeroSpaceExhausted { needed: usize, available: u128 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite (jitter reached {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("wrong likelihood mode: {0}")]
    WrongMode(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
