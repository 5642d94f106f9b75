use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset has no observed entries")]
    EmptyData,
    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
}

impl Error {
    /// True for failures of the numerical routines, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::Singular(_) | Error::Optimizer(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
