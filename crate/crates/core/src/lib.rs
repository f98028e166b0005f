//! Desk-scale laboratory for diffusion inverse solvers over analytic
//! Gaussian-mixture priors.
//!
//! Every quantity that is intractable for image-scale diffusion models
//! (scores, exact posteriors, probability-flow ODE solution maps and their
//! Jacobians) is available here in closed form or to integrator precision,
//! which makes it possible to compare posterior-sample approximations used by
//! guided samplers against the true posterior.
//!
//! Module map:
//!
//! - [`mixture`]: densities, scores, Hessians, exact posteriors and moments.
//! - [`schedule`]: VE noise ladders, forward perturbation and bridge kernels.
//! - [`dynamics`]: ancestral steps, the PF-ODE, the consistency function and
//!   its forward-sensitivity Jacobian.
//! - [`operators`]: measurement operators, distances, randomized smoothing and
//!   a small tanh MLP classifier.
//! - [`solvers`]: the guided inverse solvers and consistency-model samplers.
//! - [`analysis`]: validity comparisons, decision maps, bound checks and
//!   benchmarks.
//! - [`cli`]: experiment configuration, orchestration and artifact emission.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod mixture;
pub mod numeric;
pub mod operators;
pub mod plot;
pub mod rng;
pub mod schedule;
pub mod solvers;
pub mod verify;

pub use error::{Error, Result};

/// A point in R^d.
pub type Point = nalgebra::DVector<f64>;
/// Dense matrix, used for Hessians, covariances and Jacobians.
pub type Matrix = nalgebra::DMatrix<f64>;

/// Builds a [`Point`] from a slice.
pub fn point(values: &[f64]) -> Point {
    Point::from_column_slice(values)
}
