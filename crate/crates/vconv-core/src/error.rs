use alloc::string::String;
use core::fmt;

/// Errors surfaced by the numerical core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor construction or an op received shapes that do not match
    /// its contract.
    ShapeMismatch(String),
    /// A configuration value is outside its admissible range.
    InvalidConfig(String),
    /// A named parameter was requested but is not present in the set.
    UnknownParam(String),
    /// Serialized state (checkpoint payload) is inconsistent.
    CorruptState(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            Error::UnknownParam(m) => write!(f, "unknown parameter: {m}"),
            Error::CorruptState(m) => write!(f, "corrupt state: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
