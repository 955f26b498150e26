use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants are grouped so the CLI can map them onto
/// stable exit codes (I/O, data invariant, numerical, version).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid parameter for {op}: {message}")]
    Param { op: &'static str, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("tape already consumed by backward; re-record the forward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("data invariant violated: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("render error: missing value for slot {{{slot}}} in template {template}")]
    MissingSlot { template: String, slot: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("version mismatch: {0}")]
    Version(String),
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
