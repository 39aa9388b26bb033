use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("not a checkpoint: {0}")]
    NotACheckpoint(PathBuf),
    #[error("checkpoint version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { expected: u8, found: u8 },
    #[error("checkpoint shape mismatch for array `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("non-finite loss at episode seed {seed}: {detail}")]
    NonFiniteLoss { seed: u64, detail: String },
    #[error("non-finite probability map at sample {index}")]
    NonFiniteMap { index: usize },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
