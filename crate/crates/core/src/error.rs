use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty query group{}", .0.as_deref().map(|q| format!(" for query {q:?}")).unwrap_or_default())]
    EmptyGroup(Option<String>),

    #[error("list has no valid slots")]
    EmptyList,

    #[error("no masked positions to score")]
    EmptyMask,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no training pairs with a grade gap of at least 1")]
    NoPairs,

    #[error("unknown {kind} ids: {}", .missing.join(", "))]
    Lookup { kind: &'static str, missing: Vec<String> },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFinite { group: String },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported format version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("payload hash mismatch: stored {stored:016x}, computed {computed:016x}")]
    Integrity { stored: u64, computed: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
