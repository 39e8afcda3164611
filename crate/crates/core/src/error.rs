use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("already exists: {0}")]
    AlreadyExists(String),

    #[error("table {table}: expected next release seq {expected}, got {got}")]
    Sequencing { table: String, expected: u64, got: u64 },

    #[error("duplicate cell for row {id:?} field {field} in one release batch")]
    DuplicateCell { id: String, field: String },

    #[error("duplicate entry id {id:?} in release file")]
    DuplicateId { id: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("unsupported format {format:?}: {reason}")]
    Format { format: String, reason: String },

    #[error("malformed {format} input at byte {offset}: {reason}")]
    Parse { format: String, offset: u64, reason: String },

    #[error("malformed entry {id:?}: {reason}")]
    MalformedEntry { id: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corruption in {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("table {0} is locked by another ingest")]
    Locked(String),

    #[error("merge plan error: {0}")]
    Plan(String),

    #[error("merge error in {file} at byte {offset}: {reason}")]
    Merge { file: PathBuf, offset: u64, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn not_found(msg: impl Into<String>) -> Self {
        Error::NotFound(msg.into())
    }

    pub fn corruption(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corruption { path: path.into(), reason: reason.into() }
    }
}
