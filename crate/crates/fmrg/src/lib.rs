//! Desk-scale laboratory for reward-guided generative flows on analytically
//! tractable targets.
//!
//! The probability flow dx/dt = b_t(x) transports N(0, I) at t = 0 to a known
//! target at t = 1 (isotropic Gaussian, full-covariance Gaussian mixture, or a
//! near-degenerate "manifold" Gaussian). Because the targets are analytic, the
//! two-time flow map X_{s,t}, its Jacobian, terminal tilted/guided laws, and
//! the optimal-control solution all have closed forms, so every simulation in
//! this crate can be checked against an exact oracle.
//!
//! Module map:
//! - [`dynamics`]: time grids, interpolant schedules, velocity fields, ODE steppers
//! - [`targets`]: analytic targets, their velocities, samplers, and tilted laws
//! - [`flow_map`]: two-time flow maps (closed-form Gaussian and ODE-backed), Jacobians, VJPs
//! - [`reward`]: reward functions with joint value/gradient evaluation
//! - [`guidance`]: guided trajectory engine (operator splitting, lookahead gradients,
//!   early stopping, warmup, renoising)
//! - [`baselines`]: endpoint-approximation baselines, exact LQR control, tilt sampling
//! - [`theory`]: scalar closed-form predictions used as oracles
//! - [`experiment`]: ensembles, sweeps, slope/identity studies, CSV/JSON reporting
//! - [`config`]: flat dotted-key experiment configuration
//! - [`rng`]: counter-based splittable RNG for bitwise-reproducible ensembles

// Validation uses `!(x > 0.0)` on purpose: unlike `x <= 0.0` it also rejects
// NaN, which must never pass a positivity gate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod flow_map;
pub mod guidance;
pub mod reward;
pub mod rng;
pub mod targets;
pub mod theory;

pub use error::{Error, Result};

/// State vectors are dynamically sized columns; dimensions stay small (d <= 16).
pub type State = nalgebra::DVector<f64>;
/// Dense Jacobian / covariance matrices.
pub type Matrix = nalgebra::DMatrix<f64>;
