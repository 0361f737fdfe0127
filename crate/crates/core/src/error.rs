use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown base kernel `{name}` at byte {offset}")]
    UnknownKernel { name: String, offset: usize },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("Gram matrix is not positive definite after jitter escalation to {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("non-finite second difference at index pair ({0}, {1})")]
    NonFiniteHessian(usize, usize),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("nested sampling stagnated after {iterations} iterations (partial logZ {log_z:.4})")]
    Stagnation { iterations: usize, log_z: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::NonFiniteHessian(..)
                | Error::Optimization(_)
                | Error::Stagnation { .. }
        )
    }
}
