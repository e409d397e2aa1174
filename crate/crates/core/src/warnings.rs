//! Process-wide counters for recoverable numerical fallbacks.
//!
//! The adaptation loop prefers degrading gracefully over aborting: far-tail
//! children fall back to gating weights, singular moment matrices to a
//! pseudo-inverse, an indefinite gating Hessian to a gradient step. Each
//! event bumps a counter here so long runs stay observable without logging
//! in hot loops.

use std::sync::atomic::{AtomicU64, Ordering};

/// All stratum densities underflowed in a responsibility computation.
pub static RESPONSIBILITY_UNDERFLOW: AtomicU64 = AtomicU64::new(0);
/// Regression M-step hit a singular moment matrix and used a pseudo-inverse.
pub static SINGULAR_MOMENT_MATRIX: AtomicU64 = AtomicU64::new(0);
/// Gating Newton step was not usable; a plain gradient step was taken.
pub static GATING_NEWTON_FALLBACK: AtomicU64 = AtomicU64::new(0);

pub fn bump(counter: &AtomicU64) {
    counter.fetch_add(1, Ordering::Relaxed);
}

pub fn count(counter: &AtomicU64) -> u64 {
    counter.load(Ordering::Relaxed)
}

/// Snapshot of all counters as (name, count) pairs, for reports.
pub fn snapshot() -> Vec<(&'static str, u64)> {
    vec![
        ("responsibility_underflow", count(&RESPONSIBILITY_UNDERFLOW)),
        ("singular_moment_matrix", count(&SINGULAR_MOMENT_MATRIX)),
        ("gating_newton_fallback", count(&GATING_NEWTON_FALLBACK)),
    ]
}
