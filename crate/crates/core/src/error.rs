use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report. The variants group into the
/// three CLI exit classes: configuration/usage, data, and numeric.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("support queue is empty")]
    EmptySupport,

    #[error("requested {requested} neighbors but only {available} candidates are available")]
    NotEnoughNeighbors { requested: usize, available: usize },

    #[error("staged training error: {0}")]
    Staging(String),

    #[error("data error in {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("gradient check failed: max relative error {max_error:e} exceeds {tolerance:e}")]
    GradcheckFailed { max_error: f64, tolerance: f64 },

    #[error("training halted after {0} consecutive non-finite gradients")]
    Diverged(usize),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Staging(_) => ErrorKind::Usage,
            Error::NonFinite(_) | Error::GradcheckFailed { .. } | Error::Diverged(_) => {
                ErrorKind::Numeric
            }
            Error::Shape { .. }
            | Error::Degenerate { .. }
            | Error::EmptySupport
            | Error::NotEnoughNeighbors { .. }
            | Error::Data { .. }
            | Error::Checksum { .. }
            | Error::Io { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
