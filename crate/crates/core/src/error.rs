use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("not found: {0}")]
    NotFound(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable identifier, used in machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Shape(_) => "shape",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::NotFound(_) => "not_found",
        }
    }
}
