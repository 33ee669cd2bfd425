use std::io;

use thiserror::Error;

/// Errors produced by index construction, persistence and search.
#[derive(Debug, Error)]
pub enum CrispError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CrispError>;

impl CrispError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        CrispError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        CrispError::Format(msg.into())
    }

    /// Process exit code convention: 1 for argument errors, 2 for i/o and
    /// format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CrispError::InvalidArgument(_) => 1,
            CrispError::Format(_) | CrispError::Io(_) => 2,
        }
    }
}
