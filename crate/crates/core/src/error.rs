use std::io;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sizing error: {0}")]
    Sizing(String),
    #[error("unknown wavelet family `{0}`")]
    UnknownFamily(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("backward called before forward")]
    NotEvaluated,
    #[error("gradient check requires a scalar output, got {0} values")]
    NonScalar(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("infeasible placement: {0}")]
    Infeasible(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("format error: {0}")]
    Format(String),
    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("digest mismatch for {0}")]
    Digest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
