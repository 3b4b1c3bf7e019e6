//! Error taxonomy shared by the whole pipeline.
//!
//! Variants map one-to-one onto the CLI exit-code contract: usage errors
//! exit 2, data/format/shape errors exit 3, numeric failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor/volume shapes or configuration geometry.
    #[error("shape error: {0}")]
    Shape(String),

    /// API misuse: bad arguments, wrong call order, invalid flags.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or inconsistent file contents.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or failed numeric checks.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A configured resource budget was exceeded.
    #[error("resource error: {0}")]
    Resource(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 usage, 3 data/format/shape, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Shape(_) | Error::Data(_) | Error::Resource(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn resource(msg: impl Into<String>) -> Self {
        Error::Resource(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
