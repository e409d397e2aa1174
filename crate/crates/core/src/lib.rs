//! Adaptive auxiliary particle filtering with mixture-of-experts proposals.
//!
//! The auxiliary particle filter propagates a weighted ancestor population
//! through a proposal of the form "pick ancestor i with probability
//! proportional to ω_i ψ(ξ_i), then draw a child from r(ξ_i, ·)". Its
//! efficiency is governed by how closely ψ·r tracks the unnormalized model
//! kernel l(x, x') = g(x', y) q(x, x'). This crate fits r online, within one
//! filter step, as a mixture of curved-exponential strata (Gaussian or
//! Student-t regressions on the ancestor) combined by logistic or constant
//! gating. Fitting runs by stochastic-approximation EM on importance-sampled
//! sufficient statistics and minimizes the Kullback-Leibler divergence from
//! the auxiliary target to the proposal.
//!
//! Module map:
//! - [`strata`]: single-expert location families and their sufficient statistics;
//! - [`experts`]: mixtures, gating, the auxiliary proposal, importance weights;
//! - [`adaptation`]: batch statistics, the stochastic-approximation recursion,
//!   the M-step, and the outer fitting loop;
//! - [`smc`]: auxiliary particle filter steps and multi-step runs;
//! - [`models`]: benchmark state-space models and their closed forms;
//! - [`diagnostics`]: weight summaries and divergence estimates;
//! - [`selfcheck`]: the executable acceptance suite used by tests and the CLI.
//!
//! Monte Carlo loops are data-parallel when the default `parallel` feature is
//! on, and every loop derives one RNG substream per draw index, so results are
//! bitwise reproducible for a given seed regardless of thread count or of the
//! parallel/sequential build.

pub mod adaptation;
pub mod diagnostics;
mod error;
pub mod experts;
pub(crate) mod linalg;
pub mod models;
pub(crate) mod parallel;
pub mod rng;
pub mod sample;
pub mod selfcheck;
pub mod smc;
pub mod strata;
pub mod warnings;

pub use error::{Error, Result};
