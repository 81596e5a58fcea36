use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LidError>;

#[derive(Debug, Error)]
pub enum LidError {
    #[error("audio too short: {samples} samples, need at least {needed} for one frame")]
    TooShort { samples: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at frame {frame}: {what}")]
    NonFinite { frame: usize, what: &'static str },

    #[error("posterior row {frame} sums to {sum}, not 1")]
    NotNormalized { frame: usize, sum: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {reason} at byte offset {offset}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("missing artifact {path} (run stage `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("inputs of stage `{stage}` changed since last run; pass --force to overwrite")]
    ChecksumMismatch { stage: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LidError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LidError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line driver: 2 for data and
    /// artifact problems, 3 for numeric failures, 1 for configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            LidError::InvalidConfig(_) => 1,
            LidError::Numeric(_) | LidError::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
