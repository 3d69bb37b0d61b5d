//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps variants onto its documented exit codes: usage/parameter
/// problems exit 1, I/O and dataset problems exit 2, checkpoint problems
/// exit 3 and numeric divergence exits 4.
#[derive(Debug, Error)]
pub enum PhatError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    ImageCodec { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric divergence: {0}")]
    NumericDivergence(String),
}

impl PhatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PhatError::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            PhatError::Dimension(_) | PhatError::Parameter(_) | PhatError::Config(_) => 1,
            PhatError::Dataset(_) | PhatError::Io { .. } | PhatError::ImageCodec { .. } => 2,
            PhatError::Checkpoint(_) => 3,
            PhatError::NumericDivergence(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, PhatError>;
