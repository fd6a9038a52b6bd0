use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("embedding error: {0}")]
    Embedding(#[from] EmbeddingError),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("lookup failed: {0}")]
    NotFound(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metric undefined: {0}")]
    Undefined(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("expected dimension {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("zero vector cannot be normalized")]
    Zero,
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transport-level failure that is worth retrying.
    #[error("transient backend failure after attempt {attempt}: {message}")]
    Retryable { attempt: u32, message: String },

    /// Retries exhausted, or a non-retryable status came back.
    #[error("backend error (last status {status:?}): {message}")]
    Failed {
        status: Option<u16>,
        message: String,
    },

    #[error("could not parse backend reply: {message}")]
    Extraction { message: String, raw: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("backend misconfigured: {0}")]
    Config(String),
}
