use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm representation at index {index} ({side})")]
    ZeroNorm { index: usize, side: &'static str },

    #[error("non-finite {quantity} at step {step}")]
    NumericalAbort { step: usize, quantity: String },

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
