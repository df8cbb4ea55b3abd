use thiserror::Error;

/// Errors raised by scenario loading, simulation and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing required field `{0}`")]
    MissingField(String),

    #[error("dimension mismatch for `{name}`: expected {expected}, found {found}")]
    DimensionMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("time index {index} out of range 0..={n_steps}")]
    IndexOutOfRange { index: usize, n_steps: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },

    #[error("{what} lost positive definiteness at time index {index} (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite {
        what: &'static str,
        index: usize,
        min_eig: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
