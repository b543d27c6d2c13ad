use thiserror::Error;

/// Error type shared across the library.
#[derive(Error, Debug)]
pub enum RecoverError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(f64),

    #[error("dense Hessian capped at dK <= {cap}, requested {requested}")]
    HessianSizeCap { cap: usize, requested: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("divergence detected at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("insufficient trace: need at least {needed} pre-convergence records, got {got}")]
    InsufficientTrace { needed: usize, got: usize },

    #[error("tensor decomposition failed: {0}")]
    DecompositionFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RecoverError>;
