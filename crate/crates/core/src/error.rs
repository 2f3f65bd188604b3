use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum CsfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown config key `{key}`{}", match .suggestion {
        Some(s) => format!(" (did you mean `{s}`?)"),
        None => String::new(),
    })]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("io error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CsfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            CsfError::InvalidArgument(_) => "invalid_argument",
            CsfError::Shape(_) => "shape",
            CsfError::NonFinite(_) => "non_finite",
            CsfError::Config(_) => "config",
            CsfError::UnknownKey { .. } => "unknown_key",
            CsfError::Checkpoint(_) => "checkpoint",
            CsfError::Dataset(_) => "dataset",
            CsfError::Diverged { .. } => "diverged",
            CsfError::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, CsfError>;
