//! Hessian/Jacobian-free stochastic bilevel optimization.
//!
//! Solves `min_x Φ(x) = f(x, y*(x))` with `y*(x) = argmin_y g(x, y)` using
//! only first-order stochastic gradients: finite-difference Hessian- and
//! Jacobian-vector products feed recursive-momentum estimators for the lower
//! variable `y`, the linear-system variable `v` (kept in a ball) and the upper
//! variable `x`, all updated once per iteration.
//!
//! Everything numeric is generic over [`Scalar`] (`f32`, `f64` or the
//! double-double [`TwoFloat`]); the
//! aliases below fix `f64`, which is what the CLI uses.

// `!(x > 0)` rejects NaN on purpose; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod optimizers;
pub mod oracle;
pub mod problems;
pub mod scalar;

pub use error::{BilevelError, Result};
pub use scalar::{Scalar, TwoFloat};

pub type Point = oracle::Point<f64>;
pub type Quadratic = problems::quadratic::QuadraticProblem<f64>;
pub type QuadraticSpec = problems::quadratic::QuadraticSpec<f64>;
pub type LogisticCoupled = problems::logistic::LogisticCoupledProblem<f64>;
pub type HyperCleaning = problems::hypercleaning::HyperCleaning<f64>;
pub type Dataset = problems::dataset::Dataset<f64>;
pub type MomentumBuffer = estimators::MomentumBuffer<f64>;
