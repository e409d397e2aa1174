//! Autoregressive state observed through a censored linear functional. A
//! censored observation makes the likelihood a probit factor, so the
//! optimal kernel has no closed form and heavy-tailed strata become
//! attractive.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::MvNormal;
use crate::models::StateSpaceModel;

/// X' = A X + U with U ~ N₂(0, Σ_U) and Y = max(BᵀX + V, 0) with
/// V ~ N(0, σ²_V). Observations must be nonnegative.
#[derive(Debug, Clone)]
pub struct TobitModel {
    pub state_regression: DMatrix<f64>,
    pub state_noise: DMatrix<f64>,
    pub observation_loading: DVector<f64>,
    pub observation_variance: f64,
    pub initial_mean: DVector<f64>,
    pub initial_covariance: DMatrix<f64>,
}

impl TobitModel {
    pub fn new() -> Self {
        Self {
            state_regression: DMatrix::identity(2, 2) * 0.8,
            state_noise: DMatrix::identity(2, 2) * 2.0,
            observation_loading: DVector::from_element(2, 1.0),
            observation_variance: 0.1,
            initial_mean: DVector::from_element(2, 1.0),
            initial_covariance: DMatrix::identity(2, 2) * 10.0,
        }
    }

    /// ln Φ(-b/σ_V), the log probability that BᵀX + V is censored at zero.
    fn log_censoring_probability(&self, b: f64) -> f64 {
        let z = b / (self.observation_variance.sqrt() * std::f64::consts::SQRT_2);
        (0.5 * erfc(z)).ln()
    }
}

impl Default for TobitModel {
    fn default() -> Self {
        Self::new()
    }
}

impl StateSpaceModel for TobitModel {
    fn dim_state(&self) -> usize {
        2
    }

    fn dim_obs(&self) -> usize {
        1
    }

    fn initial_sampler(&self, rng: &mut dyn Rng) -> DVector<f64> {
        MvNormal::new(&self.initial_covariance)
            .expect("initial covariance is SPD")
            .draw(&self.initial_mean, rng)
    }

    fn prior_log_density(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64 {
        MvNormal::new(&self.state_noise)
            .expect("state noise is SPD")
            .log_density(&(&self.state_regression * ancestor), child)
    }

    fn prior_sampler(&self, ancestor: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64> {
        MvNormal::new(&self.state_noise)
            .expect("state noise is SPD")
            .draw(&(&self.state_regression * ancestor), rng)
    }

    fn loglik(&self, child: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.validate_observation(y)?;
        let b = self.observation_loading.dot(child);
        if y[0] == 0.0 {
            return Ok(self.log_censoring_probability(b));
        }
        let v = self.observation_variance;
        Ok(-0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y[0] - b).powi(2) / v))
    }

    fn observation_sampler(&self, state: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64> {
        let noise: f64 = StandardNormal.sample(rng);
        let raw = self.observation_loading.dot(state) + self.observation_variance.sqrt() * noise;
        DVector::from_element(1, raw.max(0.0))
    }

    fn validate_observation(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.dim_obs() {
            return Err(Error::DimensionMismatch(format!(
                "observation of dim {} for a model with dim 1",
                y.len()
            )));
        }
        if y[0] < 0.0 || !y[0].is_finite() {
            return Err(Error::InvalidObservation(format!(
                "censored observations must be finite and nonnegative, got {}",
                y[0]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::tests::{assert_ks, dvec, prior_mass_2d};
    use crate::rng::substream;
    use crate::selfcheck::oracle;

    #[test]
    fn deeply_negative_latent_mean_makes_censoring_certain() {
        let model = TobitModel::new();
        let loglik = model.loglik(&dvec(&[-500.0, -500.0]), &dvec(&[0.0])).unwrap();
        assert!(loglik <= 0.0);
        assert!(loglik > -1e-12, "censoring should be near certain, got {loglik}");
    }

    #[test]
    fn boundary_latent_mean_is_censored_half_the_time() {
        let model = TobitModel::new();
        let loglik = model.loglik(&dvec(&[1.0, -1.0]), &dvec(&[0.0])).unwrap();
        assert!((loglik - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn negative_observations_are_rejected() {
        let model = TobitModel::new();
        let result = model.loglik(&dvec(&[0.0, 0.0]), &dvec(&[-0.1]));
        assert!(matches!(result, Err(Error::InvalidObservation(_))));
    }

    #[test]
    fn positive_observations_use_the_gaussian_branch() {
        let model = TobitModel::new();
        let child = dvec(&[0.3, 0.1]);
        let loglik = model.loglik(&child, &dvec(&[0.7])).unwrap();
        let expected = -0.5 * ((2.0 * std::f64::consts::PI * 0.1).ln() + 0.3f64.powi(2) / 0.1);
        assert!((loglik - expected).abs() < 1e-12);
    }

    #[test]
    fn censoring_probability_matches_the_sampler() {
        // At BᵀX = 0 exactly half of the raw observations fall below zero.
        let model = TobitModel::new();
        let state = dvec(&[0.8, -0.8]);
        let mut rng = substream(38, 0, 0);
        let n = 100_000;
        let censored = (0..n)
            .filter(|_| model.observation_sampler(&state, &mut rng)[0] == 0.0)
            .count() as f64
            / n as f64;
        assert!((censored - 0.5).abs() < 0.01, "censored fraction {censored}");
    }

    #[test]
    fn prior_sampler_matches_prior_density_marginals() {
        let model = TobitModel::new();
        let ancestor = dvec(&[1.5, -0.5]);
        let mut rng = substream(39, 0, 0);
        let draws: Vec<DVector<f64>> =
            (0..100_000).map(|_| model.prior_sampler(&ancestor, &mut rng)).collect();
        let sd = 2.0f64.sqrt();
        for coord in 0..2 {
            let mean = 0.8 * ancestor[coord];
            assert_ks(draws.iter().map(|x| x[coord]).collect(), move |t| {
                oracle::normal_cdf((t - mean) / sd)
            });
        }
    }

    #[test]
    fn prior_density_integrates_to_one() {
        let model = TobitModel::new();
        let ancestor = dvec(&[1.5, -0.5]);
        let center = dvec(&[1.2, -0.4]);
        let mass = prior_mass_2d(&model, &ancestor, &center, 12.0);
        assert!((mass - 1.0).abs() < 1e-6, "prior mass {mass}");
    }
}
