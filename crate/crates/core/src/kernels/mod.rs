//! Convex building blocks shared by the parameter and factor solvers.

pub mod project;
pub mod prox;
pub mod qp;

pub use project::{isotonic_nondecreasing, isotonic_nonincreasing, project, project_simplex, Projector};
pub use prox::{prox, prox_block};
pub use qp::{qp_solve, QpProblem, QpSettings, QpSolution, QpStatus, QpWorkspace};
