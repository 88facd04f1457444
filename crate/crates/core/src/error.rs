use thiserror::Error;

use crate::lqr::RiccatiSolution;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("riccati iteration did not converge after {iterations} iterations (last step {last_step:e})")]
    NotConverged {
        iterations: usize,
        last_step: f64,
        last: Box<RiccatiSolution>,
    },
    #[error("rollout diverged at step {0}")]
    Diverged(usize),
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
