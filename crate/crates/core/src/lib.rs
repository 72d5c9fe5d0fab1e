//! Berger-Tung rate region of the vector Gaussian CEO problem under a trace
//! distortion constraint, with numerical certificates for its optimality.

pub mod cli;
pub mod error;
pub mod extremal;
pub mod fisher;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod sampling;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{d_bounds, validate, ProblemInstance, ValidationReport};
pub use objective::{bt_gradient, bt_objective, mse_chain, trace_mse, BTPoint, MseChain};
pub use solver::{solve_bt, BTSolution, SolveStatus, SolverOptions};
