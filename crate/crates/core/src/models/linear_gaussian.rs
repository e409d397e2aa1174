//! Linear observation of a two-branch linear Gaussian transition. The
//! optimal kernel and adjustment are conjugate and serve as exact
//! references for the adaptive proposals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Result;
use crate::linalg::{robust_cholesky, MvNormal};
use crate::models::{GaussianMixture, StateSpaceModel};
use crate::strata::extended;

/// g(x', y) = N₂(y; x', Σ_Y) with a prior kernel mixing two affine branches
/// Λ_j (x, 1)ᵀ under shared noise Σ. The initial law is an equal mixture of
/// two well-separated Gaussian modes.
#[derive(Debug, Clone)]
pub struct LinearGaussianMixtureModel {
    pub regressions: [DMatrix<f64>; 2],
    pub state_noise: DMatrix<f64>,
    pub observation_noise: DMatrix<f64>,
    pub initial_modes: [DVector<f64>; 2],
    pub initial_covariance: DMatrix<f64>,
}

impl LinearGaussianMixtureModel {
    pub fn new() -> Self {
        let sigma = DMatrix::identity(2, 2) * 0.1;
        Self {
            regressions: [
                DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]),
                DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, -1.0]),
            ],
            state_noise: sigma.clone(),
            observation_noise: sigma.clone(),
            initial_modes: [
                DVector::from_row_slice(&[0.0, 1.0]),
                DVector::from_row_slice(&[0.0, -1.0]),
            ],
            initial_covariance: sigma,
        }
    }

    fn branch_means(&self, ancestor: &DVector<f64>) -> [DVector<f64>; 2] {
        let bar = extended(ancestor);
        [&self.regressions[0] * &bar, &self.regressions[1] * &bar]
    }

    fn prior_mixture(&self, ancestor: &DVector<f64>) -> GaussianMixture {
        let [m1, m2] = self.branch_means(ancestor);
        GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![m1, m2],
            covariances: vec![self.state_noise.clone(), self.state_noise.clone()],
        }
    }
}

impl Default for LinearGaussianMixtureModel {
    fn default() -> Self {
        Self::new()
    }
}

/// Conjugate posterior of the child given one ancestor and the observation:
/// a two-component Gaussian mixture with shared covariance
/// C = (Σ⁻¹ + Σ_Y⁻¹)⁻¹, component means C (Σ⁻¹ Λ_j x̄ + Σ_Y⁻¹ y) and weights
/// proportional to the branch evidences N₂(y; Λ_j x̄, Σ + Σ_Y) / 2. Also
/// returns the optimal adjustment, the total evidence Σ_j N₂(y; Λ_j x̄,
/// Σ + Σ_Y) / 2.
pub fn lg_optimal_kernel(
    model: &LinearGaussianMixtureModel,
    ancestor: &DVector<f64>,
    y: &DVector<f64>,
) -> (GaussianMixture, f64) {
    let prior_precision = robust_cholesky(&model.state_noise)
        .expect("state noise is SPD")
        .inverse();
    let obs_precision = robust_cholesky(&model.observation_noise)
        .expect("observation noise is SPD")
        .inverse();
    let posterior_cov = robust_cholesky(&(&prior_precision + &obs_precision))
        .expect("sum of precisions is SPD")
        .inverse();
    let evidence_cov = &model.state_noise + &model.observation_noise;
    let evidence = MvNormal::new(&evidence_cov).expect("sum of covariances is SPD");

    let mut weights = Vec::with_capacity(2);
    let mut means = Vec::with_capacity(2);
    for branch_mean in model.branch_means(ancestor) {
        weights.push(0.5 * evidence.log_density(&branch_mean, y).exp());
        means.push(&posterior_cov * (&prior_precision * branch_mean + &obs_precision * y));
    }
    let adjustment: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= adjustment;
    }
    let mixture = GaussianMixture {
        weights,
        means,
        covariances: vec![posterior_cov.clone(), posterior_cov],
    };
    (mixture, adjustment)
}

impl StateSpaceModel for LinearGaussianMixtureModel {
    fn dim_state(&self) -> usize {
        2
    }

    fn dim_obs(&self) -> usize {
        2
    }

    fn initial_sampler(&self, rng: &mut dyn Rng) -> DVector<f64> {
        GaussianMixture {
            weights: vec![0.5, 0.5],
            means: self.initial_modes.to_vec(),
            covariances: vec![self.initial_covariance.clone(), self.initial_covariance.clone()],
        }
        .draw(rng)
    }

    fn prior_log_density(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64 {
        self.prior_mixture(ancestor).log_density(child)
    }

    fn prior_sampler(&self, ancestor: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64> {
        self.prior_mixture(ancestor).draw(rng)
    }

    fn loglik(&self, child: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.validate_observation(y)?;
        let normal = MvNormal::new(&self.observation_noise).expect("observation noise is SPD");
        Ok(normal.log_density(child, y))
    }

    fn observation_sampler(&self, state: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64> {
        MvNormal::new(&self.observation_noise)
            .expect("observation noise is SPD")
            .draw(state, rng)
    }

    fn has_closed_form_optimal(&self) -> bool {
        true
    }

    fn optimal_kernel(&self, ancestor: &DVector<f64>, y: &DVector<f64>) -> Option<GaussianMixture> {
        Some(lg_optimal_kernel(self, ancestor, y).0)
    }

    fn optimal_adjustment(&self, ancestor: &DVector<f64>, y: &DVector<f64>) -> Option<f64> {
        Some(lg_optimal_kernel(self, ancestor, y).1)
    }
}
