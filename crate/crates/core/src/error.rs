use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the motion-prior pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error in {path} (line {line}, column {column}): {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid frame {frame}: {message}")]
    InvalidFrame { frame: usize, message: String },

    #[error("index {index} out of range (max {max})")]
    Index { index: usize, max: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("simulation diverged: {quantity} = {value}")]
    Diverged { quantity: &'static str, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit status for the command line: 1 for bad input or configuration,
    /// 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } | Error::NonFiniteLoss(_) | Error::Io { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad user input (exit code 1) rather
    /// than a runtime failure (exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. }
                | Error::Validation(_)
                | Error::InvalidFrame { .. }
                | Error::Index { .. }
                | Error::Shape { .. }
                | Error::Usage(_)
                | Error::Config(_)
                | Error::Compatibility(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
