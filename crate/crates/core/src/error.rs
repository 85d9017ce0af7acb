use std::path::PathBuf;

/// Errors produced by the extraction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument or configuration value is outside its valid range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Two operands disagree on a dimension.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    /// Malformed or unsupported file content.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Well-formed input that violates a data invariant.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine failed (singular system, non-convergence).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
