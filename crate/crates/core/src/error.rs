use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MeritError>;

#[derive(Debug, Error)]
pub enum MeritError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("empty store")]
    EmptyStore,

    #[error("duplicate clip id {0:?}")]
    DuplicateId(String),

    #[error("empty clip id")]
    EmptyId,

    #[error("clip id {0:?} exceeds the 65535-byte framing limit")]
    IdTooLong(String),

    #[error("dimension mismatch: expected {expected}, got {actual}{}", context_suffix(.context))]
    DimMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("non-finite component in {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("record count mismatch: header says {header}, found {actual}")]
    CountMismatch { header: u64, actual: u64 },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("unknown clip id {0:?}")]
    UnknownId(String),

    #[error("degenerate output: pre-normalization norm {norm:e} below {eps:e}{}", context_suffix(.context))]
    DegenerateOutput { norm: f64, eps: f64, context: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty index")]
    EmptyIndex,

    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl MeritError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        MeritError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, actual: usize, context: impl Into<String>) -> Self {
        MeritError::DimMismatch {
            expected,
            actual,
            context: context.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MeritError::InvalidConfig(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        MeritError::InvalidInput(msg.into())
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl ToString) -> Self {
        MeritError::Parse {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, MeritError::Io { .. })
    }
}
