use thiserror::Error;

use crate::belief::ObservationScheme;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside its admissible range.
    #[error("parameter out of domain: {0}")]
    Domain(String),

    /// The cross-server ordering mu0(2) <= mu0(1) < mu1(1) <= mu1(2) is violated.
    #[error("server ordering violated: {0}")]
    Ordering(String),

    #[error("degenerate observation: {0}")]
    DegenerateObservation(String),

    #[error("degenerate belief transform: {0}")]
    DegenerateTransform(String),

    /// An observation payload does not match the scheme or action it is used with.
    #[error("observation contract violated: {0}")]
    Contract(String),

    #[error("resource guard: {0}")]
    Resource(String),

    #[error("operation not supported for the {0} scheme")]
    UnsupportedScheme(ObservationScheme),

    #[error("policy is not compatible with the {scheme} scheme: {reason}")]
    IncompatiblePolicy { scheme: ObservationScheme, reason: String },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
