//! Derivative-free trajectory optimization built on sigma-point quadrature.
//!
//! The crate provides four solvers for deterministic discrete-time optimal
//! control problems with quadratic costs:
//!
//! - [`ddp`]: classical differential dynamic programming (Gauss-Newton by
//!   default) and the fixed-covariance sigma-point variant SP-DP.
//! - [`sppdp`]: sigma-point probabilistic dynamic programming, an EM scheme
//!   whose backward pass fits Fourier-Hermite surrogates of the state-action
//!   value function about the closed-loop trajectory belief.
//! - [`spbsc`]: sigma-point Bayesian smoothing control, which treats the cost
//!   as a measurement and runs a forward filter and backward smoother.
//!
//! All numerical code is generic over the scalar type through [`Real`];
//! the aliases at the crate root fix it to `f64` (and `f32` where useful).
//! The [`harness`] module is the file-based experiment surface used by the
//! command-line tool.

pub mod ddp;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod policy;
pub mod quadrature;
pub mod spbsc;
pub mod sppdp;
pub mod trace;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

pub use error::{Error, Result};

/// Scalar type accepted by every numerical routine.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {}

impl<T: RealField + Copy + FromPrimitive + ToPrimitive> Real for T {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("scalar type cannot represent an f64 literal")
}

/// Converts a working scalar into `f64` (used for logging and file output).
#[inline]
pub(crate) fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

pub type SigmaRule = quadrature::SigmaRule<f64>;
pub type GaussianBelief = quadrature::GaussianBelief<f64>;
pub type QuadraticModel = quadrature::QuadraticModel<f64>;
pub type SystemSpec = models::SystemSpec<f64>;
pub type QuadraticCost = models::QuadraticCost<f64>;
pub type ProblemInstance = models::ProblemInstance<f64>;
pub type Policy = policy::AffineGaussianPolicy<f64>;
pub type SolveTrace = trace::SolveTrace;

pub type SigmaRule32 = quadrature::SigmaRule<f32>;
pub type GaussianBelief32 = quadrature::GaussianBelief<f32>;
pub type ProblemInstance32 = models::ProblemInstance<f32>;
pub type Policy32 = policy::AffineGaussianPolicy<f32>;
