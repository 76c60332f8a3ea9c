use thiserror::Error;

/// Errors raised by model construction, evaluation and fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("observation {observation} has zero density under every component")]
    ZeroDensity { observation: usize },

    #[error("component {component} produced a non-finite log-density at observation {observation}")]
    NonFinite { component: usize, observation: usize },

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
