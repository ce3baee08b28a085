use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CltaError>;

#[derive(Debug, Error)]
pub enum CltaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("non-finite value in `{param}`")]
    Numeric { param: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CltaError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CltaError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CltaError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CltaError::Io {
            path: path.into(),
            source,
        }
    }
}
