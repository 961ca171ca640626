//! Shared error type for every fallible operation in the library.

use std::fmt;

/// Classified failure raised by library operations.
///
/// The variant encodes the failure class so callers (notably the CLI) can map
/// errors to distinct exit codes without string matching.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are structurally invalid or incompatible.
    Shape(String),
    /// A scalar parameter is outside its documented range.
    Param(String),
    /// Input data is semantically invalid (e.g. a label outside the class range).
    Data(String),
    /// A serialized file does not conform to its format.
    Format(String),
    /// An operation was called in a state it does not support.
    Usage(String),
    /// A computation produced a non-finite value.
    Numeric(String),
    /// A persisted checkpoint is missing, corrupted, or inconsistent.
    Checkpoint(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Param(m) => write!(f, "parameter error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
