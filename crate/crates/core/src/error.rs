use std::io;

/// Errors raised by every stage of the discovery pipeline.
#[derive(Debug, thiserror::Error)]
pub enum SdcError {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("label {label} out of range (K = {total})")]
    LabelRange { label: i64, total: usize },

    #[error("no instances")]
    NoInstances,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },

    #[error("transport kernel underflow: {0}; try a larger epsilon")]
    KernelUnderflow(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = SdcError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SdcError::InvalidInput(msg.into()))
}
