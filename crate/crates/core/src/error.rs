use thiserror::Error;

/// Errors raised across loading, inference and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("lengthscale must be positive, got {0}")]
    NonPositiveLengthscale(f64),

    #[error("cholesky factorization failed with jitter {jitter:e}")]
    CholeskyFailure { jitter: f64 },

    #[error("cavity variance not positive for task {task}, class {class}")]
    NegativeCavityVariance { task: usize, class: usize },

    #[error("quadrature underflow: all likelihood mass vanished")]
    QuadratureUnderflow,

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("missing fit: {0}")]
    MissingFit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
