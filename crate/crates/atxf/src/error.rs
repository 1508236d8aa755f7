//! Error types shared across the engine.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum AtxfError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("checkpoint: bad magic (expected \"ATXF\")")]
    BadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    BadVersion(u32),

    #[error("checkpoint: digest mismatch (file corrupt)")]
    DigestMismatch,

    #[error("checkpoint: truncated payload ({0})")]
    Truncated(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AtxfError>;
