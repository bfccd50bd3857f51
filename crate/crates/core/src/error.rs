use std::fmt;

/// Errors raised anywhere in the library.
///
/// Variants are grouped by the kind of failure rather than the module that
/// raised them, so callers (the CLI in particular) can map them onto exit
/// codes with [`Error::category`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {what}: expected {expected} bytes, found {actual}")]
    Length { what: String, expected: u64, actual: u64 },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Bad arguments or configuration.
    Usage,
    /// Malformed or inconsistent input data.
    Data,
    /// NaN/Inf or a failed gradient check.
    Numerical,
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Parameter(_) => Category::Usage,
            Error::Numerical(_) => Category::Numerical,
            Error::Dimension(_)
            | Error::Index(_)
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::Length { .. }
            | Error::Sampling(_)
            | Error::EmptyDataset(_)
            | Error::Io(_) => Category::Data,
        }
    }

    pub(crate) fn dim(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }

    pub(crate) fn param(msg: impl fmt::Display) -> Self {
        Error::Parameter(msg.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
