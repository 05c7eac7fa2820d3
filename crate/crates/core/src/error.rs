use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variants map onto the CLI exit-code taxonomy via [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("numerical error: {message} (after {iterations} iterations)")]
    Numerical { message: String, iterations: usize },

    #[error("degenerate spectrum: all singular values are zero")]
    DegenerateSpectrum,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u16,
        expected: u16,
    },

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint consistency error: {0}")]
    Consistency(String),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Argument,
    Io,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Dimension(_) | Error::Argument(_) => ErrorCategory::Argument,
            Error::Numerical { .. } | Error::DegenerateSpectrum => ErrorCategory::Numerical,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Version { .. }
            | Error::Corrupt { .. }
            | Error::CorruptCheckpoint(_)
            | Error::Consistency(_) => ErrorCategory::Io,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}

pub(crate) use arg_err;
pub(crate) use dim_err;
