//! Small dense helpers for the symmetric positive definite matrices used by
//! the strata and the M-step.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative diagonal jitter applied when a covariance fails to factor.
pub(crate) const JITTER_SCALE: f64 = 1e-9;

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    s += m.transpose();
    s *= 0.5;
    s
}

/// Cholesky with one jitter retry.
///
/// The retry adds `JITTER_SCALE · trace(m)/n` to the diagonal once; a second
/// failure is reported as [`Error::CholeskyFailure`].
pub(crate) fn robust_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol);
    }
    let n = m.nrows();
    let eps = JITTER_SCALE * m.trace() / n as f64;
    if !(eps > 0.0) {
        return Err(Error::CholeskyFailure);
    }
    let mut jittered = m.clone();
    for i in 0..n {
        jittered[(i, i)] += eps;
    }
    jittered.cholesky().ok_or(Error::CholeskyFailure)
}

pub(crate) fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// x'ᵀ m⁻¹ x' for the factored m.
pub(crate) fn quad_form(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    chol.solve(x).dot(x)
}

/// Multivariate normal with a fixed covariance, factored once.
#[derive(Debug, Clone)]
pub(crate) struct MvNormal {
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl MvNormal {
    pub fn new(covariance: &DMatrix<f64>) -> Result<Self> {
        let chol = robust_cholesky(covariance)?;
        let dim = covariance.nrows() as f64;
        let log_norm = -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + log_det(&chol));
        Ok(Self { chol, log_norm })
    }

    pub fn log_density(&self, mean: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.log_norm - 0.5 * quad_form(&self.chol, &(x - mean))
    }

    pub fn draw<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let n = mean.len();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        mean + self.chol.l_dirty().lower_triangle() * z
    }
}
