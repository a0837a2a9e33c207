//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value violates an operation's precondition (non-finite input,
    /// out-of-vocab token, empty batch, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of its legal range or internally
    /// inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A sequence is empty or exceeds the configured maximum length.
    #[error("length error: {0}")]
    Length(String),

    /// Tensor dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A dataset directory or record does not match its manifest.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint file is malformed or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; the run is aborted.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
