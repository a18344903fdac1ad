use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum HpdtError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("{path}: line {line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("mode mismatch: checkpoint has {found}, config expects {expected}")]
    ModeMismatch { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at update {update} (batch seed {batch_seed:#018x}); diagnostics: {snapshot}")]
    NonFiniteLoss {
        update: u64,
        batch_seed: u64,
        snapshot: String,
    },

    #[error("refusing to overwrite existing file {0} (pass --force)")]
    AlreadyExists(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HpdtError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HpdtError::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(HpdtError::InvalidArgument(msg.into()))
}
