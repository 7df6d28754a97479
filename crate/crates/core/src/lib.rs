//! Stochastic approximation recursions near unstable equilibria.
//!
//! The crate simulates `X_{n+1} = X_n + γ_{n+1} G_n + c_{n+1} (ε_{n+1} + r_{n+1})`,
//! classifies equilibria by splitting their Jacobian, checks the standard
//! non-convergence hypotheses numerically, and measures how trajectories
//! shadow the mean-field flow.

// `!(x > 0.0)` is how NaN gets rejected; index loops mirror the formulas
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod linalg;
pub mod sequences;
pub mod serde_ext;
pub mod spectral;
pub mod models;
pub mod engine;
pub mod hypotheses;
pub mod flow;
pub mod experiment;
