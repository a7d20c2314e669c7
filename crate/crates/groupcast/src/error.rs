//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    Shape(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Input data violates a documented precondition.
    Data(String),
    /// An internal invariant that should be unreachable was violated.
    Invariant(String),
    /// API misuse, e.g. seeding a backward pass from a non-scalar.
    Contract(String),
    /// A value became non-finite where finiteness is required.
    NonFinite(String),
    /// Textual input could not be parsed.
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    /// Checkpoint format/version mismatch.
    Version(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Invariant(m) => write!(f, "invariant violation: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Parse { path, line, msg } => {
                write!(f, "parse error at {path}:{line}: {msg}")
            }
            Error::Version(m) => write!(f, "version error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
