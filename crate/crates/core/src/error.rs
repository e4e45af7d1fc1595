//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the public API.
///
/// Internal tensor-op contract violations (shape mismatches in a fixed
/// architecture, non-finite intermediates) panic instead; those are
/// programmer errors, not recoverable conditions.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument supplied by a caller (bad counts, ranges, names).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numeric failure during training or evaluation (NaN loss etc.).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file contents (bad magic, truncated record, hash mismatch).
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Config-file parse failure with a line number.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 1 for argument/config problems,
    /// 2 for runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Parse { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
