use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix {what} is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { what: &'static str, min_eigenvalue: f64 },
    #[error("matrix {0} is singular")]
    Singular(&'static str),
    #[error("column {sample} is off the simplex by {deviation:e}")]
    OffSimplex { sample: usize, deviation: f64 },
    #[error("{solver} did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
