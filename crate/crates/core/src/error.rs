use std::path::PathBuf;

use emavio_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    /// Euler extraction too close to pitch = ±π/2.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: u64, msg: String },

    #[error("no sub-sequence fits the trajectory: {0}")]
    EmptyReport(String),
}

impl Error {
    /// Process exit status for this error. Dataset errors use their own
    /// codes (10 to 13).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Io { .. } => 4,
            Error::Parse { .. } => 5,
            Error::Checkpoint(_) => 6,
            Error::Divergence { .. } => 7,
            Error::EmptyReport(_) => 8,
            Error::Tensor(_) | Error::Contract(_) | Error::Degenerate(_) => 9,
            Error::Dataset(e) => e.code(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Dataset container failures, each with its own code.
#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("unsupported dataset format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated dataset: {0}")]
    Truncated(String),

    #[error("checksum mismatch in sequence {id}")]
    Checksum { id: u32 },

    #[error("malformed manifest: {0}")]
    Manifest(String),
}

impl DatasetError {
    /// Stable numeric code, also used as the CLI exit status.
    pub fn code(&self) -> i32 {
        match self {
            DatasetError::Version { .. } => 10,
            DatasetError::Truncated(_) => 11,
            DatasetError::Checksum { .. } => 12,
            DatasetError::Manifest(_) => 13,
        }
    }
}
