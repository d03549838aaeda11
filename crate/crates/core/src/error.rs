use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories shared by every pipeline stage.
///
/// The CLI maps these onto process exit codes, so new variants must be
/// classified in [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error("missing embedding for image `{0}`")]
    MissingEmbedding(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Coarse classification used for exit codes and structured logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    External,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(location: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.to_string(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::MissingEmbedding(_)
            | Error::DimensionMismatch { .. }
            | Error::EmptyDataset(_)
            | Error::UndefinedCorrelation(_) => ErrorKind::Validation,
            Error::Io { .. } | Error::Parse { .. } | Error::Store(_) => ErrorKind::Io,
            Error::Client(_) => ErrorKind::External,
        }
    }
}

/// Malformed or inconsistent embedding store contents.
///
/// Every read-side variant carries the byte offset at which decoding failed.
#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("bad magic bytes at offset 0: expected \"SVEM\", found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported format version {version} at offset 4")]
    UnsupportedVersion { version: u32 },

    #[error("truncated file at offset {offset}: needed {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },

    #[error("invalid UTF-8 in record id at offset {offset}")]
    InvalidId { offset: usize },

    #[error("empty record id at offset {offset}")]
    EmptyId { offset: usize },

    #[error("record id longer than 65535 bytes: `{id}`")]
    IdTooLong { id: String },

    #[error("duplicate record id `{id}`{}", offset.map(|o| format!(" at offset {o}")).unwrap_or_default())]
    DuplicateId { id: String, offset: Option<usize> },

    #[error("record `{id}` has dimension {actual}, store dimension is {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },

    #[error("zero dimension with {count} records")]
    ZeroDimension { count: u64 },

    #[error("non-finite component in record `{id}`{}", offset.map(|o| format!(" at offset {o}")).unwrap_or_default())]
    NonFinite { id: String, offset: Option<usize> },

    #[error("{extra} trailing bytes after last record at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

/// Failure reported by a panorama metadata backend.
#[derive(Debug, Error)]
#[error("metadata client failure{}: {message}", if *retryable { " (retryable)" } else { "" })]
pub struct ClientError {
    pub message: String,
    pub retryable: bool,
}

impl ClientError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }
}
