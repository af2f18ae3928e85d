use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the planner stack.
#[derive(Debug, Error)]
pub enum DapError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence error: {0}")]
    Sequence(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl DapError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DapError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        DapError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the `dap` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            DapError::Usage(_) => 2,
            DapError::Validation(_)
            | DapError::Config(_)
            | DapError::Format { .. }
            | DapError::Sequence(_)
            | DapError::Size(_)
            | DapError::Domain(_) => 3,
            DapError::Io { .. } => 4,
            DapError::Training(_) | DapError::Internal(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, DapError>;
