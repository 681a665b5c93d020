use std::fmt;

/// Error taxonomy for the whole crate. The variants correspond to the
/// error classes the CLI maps onto distinct exit codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Invalid configuration or violated configuration invariant.
    Config(String),
    /// Tensor shape mismatch; the message carries both shapes.
    Shape(String),
    /// Malformed or inconsistent data (corpus, masks, sentinel structure).
    Data(String),
    /// Non-finite values or a failed numeric invariant.
    Numeric(String),
    /// File-format violation (bad magic, version, checksum, truncation).
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn config(m: impl Into<String>) -> Self {
        Error::Config(m.into())
    }
    pub fn shape(m: impl Into<String>) -> Self {
        Error::Shape(m.into())
    }
    pub fn data(m: impl Into<String>) -> Self {
        Error::Data(m.into())
    }
    pub fn numeric(m: impl Into<String>) -> Self {
        Error::Numeric(m.into())
    }
    pub fn format(m: impl Into<String>) -> Self {
        Error::Format(m.into())
    }
}
