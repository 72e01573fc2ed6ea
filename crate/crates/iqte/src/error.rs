use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes between related inputs.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter or option outside its documented domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or non-finite input data.
    #[error("invalid data: {0}")]
    Data(String),

    /// The projection program has no feasible point at the given (lambda, gamma).
    #[error("projection infeasible: {0}")]
    Infeasible(String),

    /// A variance estimate of exactly zero; inference would be meaningless.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// An iterative solver failed in a way that cannot be represented as a result.
    #[error("solver failure: {0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
