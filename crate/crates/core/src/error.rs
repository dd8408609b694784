use std::io;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector")]
    DegenerateVector,

    #[error("variance {0:e} is at or below the zero-variance threshold")]
    ZeroVariance(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("activation cache was produced by different weights")]
    CacheMismatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// True for failures caused by unreadable or malformed files rather than
    /// by invalid arguments.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Format(_) | Error::CorruptData(_) | Error::ManifestMismatch(_)
        )
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Format(e.to_string())
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
