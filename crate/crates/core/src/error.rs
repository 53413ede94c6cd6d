use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met (shapes, ranges, labels).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss while probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{0}")]
    Undefined(String),

    #[error("line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("pseudo-label unavailable for sample {sample_id}: {reason}")]
    PseudoLabelUnavailable { sample_id: String, reason: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's configuration rather than a
    /// failing stage.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
