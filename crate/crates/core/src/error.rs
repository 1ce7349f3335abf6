use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Convolution geometry that does not produce a whole, positive output.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed serialized or in-memory data (bad colidx, bad header, ...).
    #[error("format error: {0}")]
    Format(String),

    /// A structural invariant of a validated type does not hold.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Two execution paths disagreed beyond tolerance.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checksum mismatch for {path}: expected {expected:016x}, found {found:016x}")]
    Checksum {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Checksum { .. } | Error::Version { .. } | Error::Json(_)
        )
    }

    pub fn is_invariant(&self) -> bool {
        matches!(self, Error::Invariant(_) | Error::Integrity(_))
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
macro_rules! invariant_err {
    ($($arg:tt)*) => { $crate::error::Error::Invariant(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use {config_err, format_err, invariant_err, shape_err};
