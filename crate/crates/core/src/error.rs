//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An index (label, vocabulary id, head id, group id) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A configuration value violates its documented invariants.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was requested against state that does not support it.
    #[error("state error: {0}")]
    State(String),

    /// A function argument is outside its domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// A checkpoint file is malformed.
    #[error("format error in {section}: {message}")]
    Format { section: &'static str, message: String },

    /// Client models cannot be averaged together.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// A dataset directory or metadata table could not be ingested.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(section: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            section,
            message: message.into(),
        }
    }
}
