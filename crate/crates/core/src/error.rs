//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes for an operation. Names the op and the shapes involved.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// An operation produced NaN or Inf, or was fed non-finite input.
    #[error("non-finite values in {op}: {details}")]
    NonFinite { op: &'static str, details: String },

    /// A caller violated an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data (dataset records, alignments, vocab range).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Training loss became non-finite; carries a diagnostic snapshot.
    #[error("training diverged at step {step}: {details}")]
    Diverged { step: usize, details: String },

    /// Checkpoint file is malformed or does not match the run.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
