use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for {bound} classes")]
    Index { index: usize, bound: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("backward error: {0}")]
    Backward(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
