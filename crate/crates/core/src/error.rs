use thiserror::Error;

/// Errors raised by the forecasting engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("index {index} out of range 1..={len}")]
    Index { index: usize, len: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error("tape structure error: {0}")]
    Structure(String),
    #[error("training diverged at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
