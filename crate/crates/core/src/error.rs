use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by file I/O, validation, and training operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: size mismatch, expected {expected} bytes but file has {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: non-finite value at row {row}, column {col}")]
    NonFinite {
        path: PathBuf,
        row: usize,
        col: usize,
    },

    #[error("{path}:{line}: malformed manifest record: {msg}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("record {id:?}: row {row} out of range (set has {count} rows)")]
    RowOutOfRange { id: String, row: usize, count: usize },

    #[error("text record {text_id:?}: image id {image_id:?} not found in image manifest")]
    UnresolvedImageId { text_id: String, image_id: String },

    #[error("text record {text_id:?} has no image_id")]
    MissingImageId { text_id: String },

    #[error("anchor {anchor} has no eligible in-batch negative (all image ids equal)")]
    NoEligibleNegative { anchor: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
