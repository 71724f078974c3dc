use thiserror::Error;

/// Errors produced by the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A value fell outside the physical or mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Array shapes do not agree between operands.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// An iterative solver produced a non-finite value.
    #[error("numerical failure at iteration {iteration}: {reason}")]
    NumericalFailure { iteration: usize, reason: String },

    /// Rejection sampling could not place the requested sources.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Parameter training found no usable configuration.
    #[error("training failure: {0}")]
    Training(String),

    /// A persisted file did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
