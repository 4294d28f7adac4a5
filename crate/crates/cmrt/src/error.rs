//! Error type shared across the toolkit.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by any cmrt operation.
#[derive(Debug)]
pub enum Error {
    /// A precondition on operation inputs was violated.
    InvalidInput(String),
    /// Tensor or array shapes do not agree.
    ShapeMismatch(String),
    /// A checkpoint container failed validation (bad magic, truncation, overlap, ...).
    Format(String),
    /// Model-config digests disagree between artifacts that must be congruent.
    DigestMismatch(String),
    /// Training aborted (NaN loss, frame misalignment, non-finite gradient).
    Training(String),
    /// I/O failure, with the path that caused it.
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::DigestMismatch(msg) => write!(f, "digest mismatch: {msg}"),
            Error::Training(msg) => write!(f, "training aborted: {msg}"),
            Error::Io { path, source } => write!(f, "io error at {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
