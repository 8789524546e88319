use thiserror::Error;

pub type Result<T> = std::result::Result<T, ShdError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShdError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: row {row} has no unmasked entries")]
    FullyMaskedRow { op: &'static str, row: usize },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
}

impl ShdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ShdError::InvalidArgument(msg.into())
    }
}
