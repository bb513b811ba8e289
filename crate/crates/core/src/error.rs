use std::io;

use thiserror::Error;

use crate::bridge::BridgeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("degenerate vector: norm below the underflow threshold")]
    DegenerateVector,

    #[error("non-finite component at position {0}")]
    NonFinite(usize),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("corpus file format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("invalid batch: {0}")]
    Batch(String),

    #[error("invalid prompt context: {0}")]
    Context(String),

    #[error("could not parse a real/fake answer from {raw:?}")]
    Parse { raw: String },

    #[error(transparent)]
    Bridge(#[from] BridgeError),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("manifest error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
