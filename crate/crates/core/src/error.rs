use thiserror::Error;

use crate::solver::BTSolution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix inversion failed: {0}")]
    SingularMatrix(String),

    #[error("B_{agent} reached the boundary Sigma^-1 - B = 0; objective diverges")]
    BoundaryDivergence { agent: usize },

    #[error("no feasible start could be constructed: {0}")]
    Infeasible(String),

    #[error("solver did not converge within the iteration budget (best rate {:.6e} nats)", .0.rate)]
    NonConvergence(Box<BTSolution>),

    #[error("oracle grid of {points:.3e} points exceeds the budget of {budget:.0e}")]
    TooLarge { points: f64, budget: f64 },

    #[error("oracle grid requires diagonal K and Sigma_i")]
    NotDiagonal,

    #[error("degenerate split at eigenvalue {index} for weight {agent}: lambda d^2 - mu d / 2 = {value:.3e}")]
    DegenerateSplit { index: usize, agent: usize, value: f64 },

    #[error("conditioning block is singular: {0}")]
    SingularConditioning(String),

    #[error("projected covariance lost rank: {0}")]
    DegenerateProjection(String),

    #[error("channel violates the trace constraint: tr cov(X|M) = {trace:.6e} > d = {d:.6e}")]
    InfeasibleChannel { trace: f64, d: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
