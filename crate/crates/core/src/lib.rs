//! Switched-system analysis of linear Q-learning with linear function
//! approximation.
//!
//! The deterministic mean-path recursion `θ ← θ + α g(θ)` is represented
//! exactly as a switched linear system whose modes are indexed by
//! deterministic policies. This crate builds those mode families, brackets
//! their joint spectral radius, constructs the product-based piecewise
//! quadratic Lyapunov norm, and simulates deterministic, i.i.d. and
//! Markovian (optionally ℓ₂-regularized) linear Q-learning against the
//! resulting error envelopes.
//!
//! Module map:
//!
//! - [`mdp`]: finite MDP, features, sampling distributions, policies.
//! - [`bellman`]: residual, learning/iteration maps and the fixed-point solver.
//! - [`switching`]: max-linearization, mode matrices, convex-hull weights.
//! - [`jsr`]: bounded-depth JSR brackets and regularization bounds.
//! - [`lyapunov`]: truncated Lyapunov norm, drift checks, norm-ball meshes.
//! - [`simulate`]: trajectory and ensemble simulation.
//! - [`certificates`]: closed-form envelopes and noise-growth checks.
//! - [`presets`]: the worked example problems.

// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bellman;
pub mod certificates;
pub mod error;
pub mod jsr;
pub mod linalg;
pub mod lyapunov;
pub mod mdp;
pub mod presets;
pub mod simulate;
pub mod switching;

pub use error::{Error, Result};
pub use mdp::{DeterministicPolicy, Problem, StochasticPolicy};

/// Dense real matrix used throughout the crate.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense real vector used throughout the crate.
pub type Vect = nalgebra::DVector<f64>;
