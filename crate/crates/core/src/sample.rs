//! Weighted particle populations.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A population of particles with unnormalized, nonnegative weights.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    /// Index of each particle's ancestor in the previous population, present
    /// when this sample was produced by a filter step.
    pub ancestors: Option<Vec<usize>>,
}

impl WeightedSample {
    pub fn new(particles: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InvalidConfig("empty particle population".into()));
        }
        if particles.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} particles but {} weights",
                particles.len(),
                weights.len()
            )));
        }
        let dim = particles[0].len();
        if particles.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch("ragged particle dimensions".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("weights must be finite and nonnegative".into()));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::FilterCollapse);
        }
        Ok(Self { particles, weights, ancestors: None })
    }

    /// Equally weighted population.
    pub fn uniform(particles: Vec<DVector<f64>>) -> Result<Self> {
        let weights = vec![1.0; particles.len()];
        Self::new(particles, weights)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let mut w = self.weights.clone();
        normalize_weights(&mut w).expect("validated weights normalize");
        w
    }

    pub fn weighted_mean(&self) -> DVector<f64> {
        let w = self.normalized_weights();
        let mut mean = DVector::zeros(self.dim());
        for (p, wi) in self.particles.iter().zip(&w) {
            mean.axpy(*wi, p, 1.0);
        }
        mean
    }
}

/// Rescales `weights` in place so a left-to-right sum is exactly 1.0.
///
/// The final entry absorbs the rounding remainder; if that would push it
/// negative the largest entry absorbs it instead.
pub fn normalize_weights(weights: &mut [f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidConfig("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::FilterCollapse);
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    for _ in 0..4 {
        let sum: f64 = weights.iter().sum();
        if sum == 1.0 {
            return Ok(());
        }
        let remainder = 1.0 - sum;
        let last = weights.len() - 1;
        let target = if weights[last] + remainder >= 0.0 {
            last
        } else {
            weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        };
        weights[target] += remainder;
    }
    let sum: f64 = weights.iter().sum();
    if sum == 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("normalization failed to converge (sum = {sum})")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalizes_simple_weights_exactly() {
        let mut w = [1.0, 1.0, 2.0];
        normalize_weights(&mut w).unwrap();
        assert_eq!(w, [0.25, 0.25, 0.5]);
        assert_eq!(w.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn single_positive_entry_collapses_to_one() {
        let mut w = [0.0, 0.0, 5.0];
        normalize_weights(&mut w).unwrap();
        assert_eq!(w, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_zero_weights_are_rejected() {
        let mut w = [0.0, 0.0];
        assert!(matches!(normalize_weights(&mut w), Err(Error::FilterCollapse)));
    }

    #[test]
    fn weighted_mean_matches_hand_value() {
        let sample = WeightedSample::new(
            vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![2.0])],
            vec![1.0, 3.0],
        )
        .unwrap();
        assert!((sample.weighted_mean()[0] - 1.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn normalized_sum_is_exactly_one(
            raw in proptest::collection::vec(0.0f64..1e12, 1..200),
        ) {
            prop_assume!(raw.iter().any(|w| *w > 0.0));
            let mut w = raw;
            normalize_weights(&mut w).unwrap();
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert_eq!(w.iter().sum::<f64>(), 1.0);
        }
    }
}
