use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Coarse failure class, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Fit(_) | Error::Numeric(_) => ErrorKind::Numeric,
            Error::Io { .. }
            | Error::Format(_)
            | Error::Consistency(_)
            | Error::Domain(_)
            | Error::Dimension(_)
            | Error::Invalid(_) => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
