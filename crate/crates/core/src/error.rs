use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error at {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("class mismatch: checkpoint has {checkpoint:?}, dataset has {dataset:?}")]
    ClassMismatch {
        checkpoint: Vec<String>,
        dataset: Vec<String>,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("unsupported graph: {0}")]
    UnsupportedGraph(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures specific to reading a weight file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}, expected \"PNDW\"")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            message: msg.into(),
        }
    }
}
