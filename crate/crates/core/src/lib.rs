//! Drift-implicit backward Euler-Maruyama integration for stochastic delay
//! differential equations
//!
//! ```text
//! dx(t) = f(x(t), x(t - tau)) dt + g(x(t), x(t - tau)) dW(t),   x(t) = xi(t) on [-tau, 0]
//! ```
//!
//! The scheme is implicit in the drift and explicit in the diffusion:
//!
//! ```text
//! X_k = xi(t_k),                                                       k = -M..0
//! X_k = X_{k-1} + f(X_k, X_{k-M}) dt + g(X_{k-1}, X_{k-M-1}) dW_{k-1},  k >= 1
//! ```
//!
//! with `dt = tau / M`. Around the integrator the crate provides seeded,
//! coarsenable Brownian increments, segment statistics (sup-norms, two-sample
//! Kolmogorov-Smirnov, a coupled bounded-Lipschitz bound, time averages), a
//! numeric auditor for the structural inequalities on the coefficients, and
//! the long-run experiment harnesses built from those pieces.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assumptions;
pub mod brownian;
pub mod constants;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod model;
pub mod output;
pub mod segment;
pub mod stepper;

pub use brownian::BrownianPaths;
pub use constants::AssumptionConstants;
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use model::{InitialHistory, Matrix, SddeModel, StateVec};
pub use stepper::{ImplicitSolveConfig, Segment, Trajectory};
