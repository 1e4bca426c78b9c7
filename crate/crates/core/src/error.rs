use sme_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmeError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("token id {token} outside vocabulary of {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SmeError> = std::result::Result<T, E>;
