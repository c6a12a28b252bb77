//! Error type shared across the library.
//!
//! Variants map onto the CLI exit-code classes: configuration and shape
//! problems, file problems, numeric failures, and verification failures.

use std::path::PathBuf;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration, invalid arguments, or shape mismatches.
    #[error("config error: {0}")]
    Config(String),

    /// File-system and file-format failures.
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },

    /// Numeric failure (divergence, singular system, non-finite value).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A mandatory verification check failed.
    #[error("verification failure: {0}")]
    Verification(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        Error::Verification(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io { path: path.into(), message: err.to_string() }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Verification(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
