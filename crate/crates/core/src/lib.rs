//! Fitting discrete latent factor models by alternating convex solves.
//!
//! A model assigns each sample to one of `K` factors, each factor carrying
//! its own parameter vector and convex loss. Assignments are relaxed to the
//! probability simplex and the problem is solved by block coordinate
//! descent: a parameter step ([`psolve`]) alternating with a factor step
//! ([`fsolve`]), driven and restarted by [`engine`].

pub mod engine;
pub mod error;
pub mod experiments;
pub mod fsolve;
pub mod kernels;
pub mod model;
pub mod oracle;
pub mod psolve;

pub use engine::{fit, fit_runs, gap, init_factors, FitResult, FitStatus, TracePoint};
pub use error::{DlfmError, Result};
pub use fsolve::{harden, solve_f_kl, solve_f_plain, FactorMatrix, Labels, LossMatrix};
pub use model::{
    loss_eval, loss_grad, loss_matrix, objective, validate, ConstraintAtom, Controls, Dataset, LossAtom, LossKind,
    ModelSpec, RegularizerAtom, ValidationReport, INF,
};
pub use oracle::{brute_force_fit, fd_gradient, qp_active_set_oracle, OracleResult};
pub use psolve::{solve_p, PSolveOutcome, PSolver};
