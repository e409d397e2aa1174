//! Planar random walk observed through its distance to the origin. The
//! likelihood depends on the state only through its norm, so the posterior
//! concentrates near a circle and no linear proposal fits it well.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::linalg::MvNormal;
use crate::models::StateSpaceModel;

/// X' = X + V with V ~ N₂(0, Σ_X) and Y = ‖X‖₂ + W with W ~ N(0, σ²_Y).
#[derive(Debug, Clone)]
pub struct BesselModel {
    pub state_noise: DMatrix<f64>,
    pub observation_variance: f64,
    pub initial_mean: DVector<f64>,
    pub initial_covariance: DMatrix<f64>,
}

impl BesselModel {
    pub fn new() -> Self {
        Self {
            state_noise: DMatrix::identity(2, 2),
            observation_variance: 0.01,
            initial_mean: DVector::from_row_slice(&[0.7, 0.7]),
            initial_covariance: DMatrix::identity(2, 2) * 0.5,
        }
    }

    fn range_loglik(&self, range: f64, y: f64) -> f64 {
        let v = self.observation_variance;
        -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y - range).powi(2) / v)
    }
}

impl Default for BesselModel {
    fn default() -> Self {
        Self::new()
    }
}

impl StateSpaceModel for BesselModel {
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
            .log_density(ancestor, child)
    }

    fn prior_sampler(&self, ancestor: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64> {
        MvNormal::new(&self.state_noise).expect("state noise is SPD").draw(ancestor, rng)
    }

    fn loglik(&self, child: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.validate_observation(y)?;
        Ok(self.range_loglik(child.norm(), y[0]))
    }

    fn observation_sampler(&self, state: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64> {
        let noise: f64 = StandardNormal.sample(rng);
        DVector::from_element(1, state.norm() + self.observation_variance.sqrt() * noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::tests::{assert_ks, dvec, prior_mass_2d};
    use crate::rng::substream;
    use crate::selfcheck::oracle;
    use rand::RngExt;

    #[test]
    fn likelihood_is_rotation_invariant() {
        let model = BesselModel::new();
        let y = dvec(&[1.4]);
        let mut rng = substream(35, 0, 0);
        for _ in 0..20 {
            let child = dvec(&[rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 6.0 - 3.0]);
            let angle = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            let rotated = dvec(&[
                angle.cos() * child[0] - angle.sin() * child[1],
                angle.sin() * child[0] + angle.cos() * child[1],
            ]);
            let a = model.loglik(&child, &y).unwrap();
            let b = model.loglik(&rotated, &y).unwrap();
            assert!((a - b).abs() < 1e-10, "rotation changed loglik by {}", a - b);
        }
    }

    #[test]
    fn children_on_the_observed_circle_attain_the_mode() {
        let model = BesselModel::new();
        let peak = model.loglik(&dvec(&[1.0, 0.0]), &dvec(&[1.0])).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 0.01).ln();
        assert!((peak - expected).abs() < 1e-12);
        let off = model.loglik(&dvec(&[1.1, 0.0]), &dvec(&[1.0])).unwrap();
        assert!(off < peak);
    }

    #[test]
    fn prior_sampler_matches_prior_density_marginals() {
        let model = BesselModel::new();
        let ancestor = dvec(&[-0.4, 1.1]);
        let mut rng = substream(36, 0, 0);
        let draws: Vec<DVector<f64>> =
            (0..100_000).map(|_| model.prior_sampler(&ancestor, &mut rng)).collect();
        for coord in 0..2 {
            assert_ks(draws.iter().map(|x| x[coord]).collect(), |t| {
                oracle::normal_cdf(t - ancestor[coord])
            });
        }
    }

    #[test]
    fn initial_sampler_matches_the_stated_law() {
        let model = BesselModel::new();
        let mut rng = substream(37, 0, 0);
        let draws: Vec<f64> = (0..100_000).map(|_| model.initial_sampler(&mut rng)[0]).collect();
        assert_ks(draws, |t| oracle::normal_cdf((t - 0.7) / 0.5f64.sqrt()));
    }

    #[test]
    fn prior_density_integrates_to_one() {
        let model = BesselModel::new();
        let ancestor = dvec(&[-0.4, 1.1]);
        let mass = prior_mass_2d(&model, &ancestor, &ancestor, 8.0);
        assert!((mass - 1.0).abs() < 1e-6, "prior mass {mass}");
    }
}
