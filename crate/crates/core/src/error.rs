//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// `Config` maps to CLI exit code 2, everything else to exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Shape(String),
    /// Lookup index outside a table.
    Index { index: usize, len: usize, what: String },
    /// Malformed or inconsistent input data.
    Data(String),
    /// Bad configuration value.
    Config(String),
    /// API contract violation (caller bug).
    Contract(String),
    /// Softmax row with every position masked.
    InvalidMask(String),
    /// Filesystem or serialization failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Index { index, len, what } => {
                write!(f, "index error: id {index} out of range for {what} of size {len}")
            }
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::InvalidMask(msg) => write!(f, "invalid mask: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(format!("json: {e}"))
    }
}
