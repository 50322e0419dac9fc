use thiserror::Error;

/// Errors raised by the grid, elliptic and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("linear solve did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    LinearNotConverged { iterations: usize, residual: f64 },

    #[error("linear system is not positive definite")]
    NotPositiveDefinite,

    /// Newton could not decrease the residual even at the smallest damping.
    #[error("Newton iteration stagnated after {steps} steps (residual trace: {trace:?})")]
    Stagnation { steps: usize, trace: Vec<f64> },

    #[error("iteration cap of {cap} reached (last residual {residual:.3e})")]
    MaxIterations { cap: usize, residual: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
