use std::fmt;

/// Error type shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Two tensors (or a tensor and a parameter set) do not fit together.
    /// The message names the offending dimension.
    ShapeMismatch(String),
    /// A dimension violates a precondition (zero, odd where even is needed,
    /// not divisible by the required factor, ...).
    InvalidDimension(String),
    /// A file could not be opened or read at the OS level.
    Io(String),
    /// A file was read but its contents are not a valid instance of the
    /// expected format (bad magic, truncation, overflowing dimensions, ...).
    Malformed(String),
    /// A well-formed weight file does not match the active model
    /// configuration (unknown tensor name, wrong dims, wrong order).
    ConfigMismatch(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidDimension(msg) => write!(f, "invalid dimension: {msg}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
            Error::Malformed(msg) => write!(f, "malformed file: {msg}"),
            Error::ConfigMismatch(msg) => write!(f, "weight/config mismatch: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
