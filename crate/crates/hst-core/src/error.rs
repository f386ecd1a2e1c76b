//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HstError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest entry `{subject}`: {message}")]
    Manifest { subject: String, message: String },

    #[error("parse error in {path} at row {row}, column {col}: {message}")]
    Parse { path: PathBuf, row: usize, col: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training aborted at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected}); migrate the file")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (file corrupt or truncated)")]
    CheckpointChecksum,
}

pub type Result<T> = std::result::Result<T, HstError>;

impl HstError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HstError::Io { path: path.into(), source }
    }
}
