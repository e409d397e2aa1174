//! Sample-quality criteria and the Monte Carlo divergence estimator.
//!
//! The divergence of interest is d_KL(μ̄ ‖ π_θ) between the auxiliary target
//! μ̄(i, x') ∝ ω_i l(ξ_i, x') and the proposal π_θ(i, x') ∝ ω_i r_θ(ξ_i, x').
//! Up to a θ-free constant it equals −E_μ̄[log r_θ], which is estimated by
//! self-normalized importance sampling from π_θ itself. The same draws give
//! a pinned variant with the constant resolved (see [`estimate_kld`]).

use rand::Rng;

use crate::error::{Error, Result};
use crate::experts::{AuxiliaryProposalConfig, LogKernel, ProposalKernel};
use crate::parallel;
use crate::rng::{salt, substream};
use crate::sample::WeightedSample;

/// Effective sample size (Σw)²/Σw², in [1, N].
pub fn ess(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::FilterCollapse);
    }
    Ok(sum * sum / sum_sq)
}

/// Σ w̄ log w̄ over normalized weights, with 0·log 0 := 0; in [−log N, 0].
pub fn negated_entropy(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::FilterCollapse);
    }
    let value: f64 = weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| {
            let normalized = w / sum;
            normalized * normalized.ln()
        })
        .sum();
    Ok(value.min(0.0))
}

/// std(w̄)/mean(w̄) of the normalized weights; 0 for uniform weights.
pub fn coefficient_of_variation(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::FilterCollapse);
    }
    let n = weights.len() as f64;
    let mean = 1.0 / n;
    let variance: f64 =
        weights.iter().map(|w| (w / sum - mean) * (w / sum - mean)).sum::<f64>() / n;
    Ok(variance.sqrt() / mean)
}

/// Cumulative weight share of the k largest-weight particles, as a curve
/// over the particle fraction k/N. Starts at (0, 0), ends at (1, 1).
#[derive(Debug, Clone)]
pub struct ProportionCurve {
    pub particle_fraction: Vec<f64>,
    pub mass_fraction: Vec<f64>,
}

impl ProportionCurve {
    /// Mass share held by the top `particle_fraction` of particles
    /// (step-function evaluation, rounding the count down).
    pub fn mass_share_at(&self, particle_fraction: f64) -> f64 {
        let n = self.particle_fraction.len() - 1;
        let k = (particle_fraction * n as f64).floor() as usize;
        self.mass_fraction[k.min(n)]
    }

    /// Smallest particle fraction whose top-weight particles carry at least
    /// `mass` of the total.
    pub fn particle_share_for_mass(&self, mass: f64) -> f64 {
        for (share, covered) in self.particle_fraction.iter().zip(&self.mass_fraction) {
            if *covered >= mass {
                return *share;
            }
        }
        1.0
    }
}

pub fn proportion_curve(weights: &[f64]) -> Result<ProportionCurve> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::FilterCollapse);
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let mut particle_fraction = Vec::with_capacity(n + 1);
    let mut mass_fraction = Vec::with_capacity(n + 1);
    particle_fraction.push(0.0);
    mass_fraction.push(0.0);
    let mut cumulative = 0.0;
    for (k, w) in sorted.iter().enumerate() {
        cumulative += w;
        particle_fraction.push((k + 1) as f64 / n as f64);
        mass_fraction.push((cumulative / sum).min(1.0));
    }
    mass_fraction[n] = 1.0;
    Ok(ProportionCurve { particle_fraction, mass_fraction })
}

/// Monte Carlo divergence estimate between the auxiliary target and a
/// proposal, from one batch of `reference_sample_size` reference draws.
#[derive(Debug, Clone)]
pub struct KldEstimate {
    /// Self-normalized estimate of −E_μ̄[log r_θ]: the divergence up to an
    /// additive constant that does not depend on the proposal.
    pub value_up_to_constant: f64,
    /// Delta-method standard error of `value_up_to_constant`.
    pub standard_error: f64,
    /// Pinned divergence d_KL(μ̄ ‖ π_θ) with the constant resolved, equal to
    /// the negated entropy of the importance weights plus log n. Nonnegative;
    /// zero exactly at uniform weights.
    pub divergence: f64,
    /// Delta-method standard error of `divergence`.
    pub divergence_standard_error: f64,
    pub reference_sample_size: usize,
    /// Set when the effective sample size of the reference draw fell
    /// below 10; the estimate is then little better than a guess.
    pub unreliable: bool,
}

impl KldEstimate {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "value_up_to_constant": self.value_up_to_constant,
            "standard_error": self.standard_error,
            "divergence": self.divergence,
            "divergence_standard_error": self.divergence_standard_error,
            "reference_sample_size": self.reference_sample_size,
            "unreliable": self.unreliable,
        })
    }
}

/// Estimates d_KL(μ̄ ‖ π_θ) for `proposal` over the given ancestors by
/// self-normalized importance sampling with `reference_n` draws from the
/// proposal itself (uniform adjustment weights).
pub fn estimate_kld<R: Rng + ?Sized>(
    proposal: &dyn ProposalKernel,
    ancestors: &WeightedSample,
    kernel: &dyn LogKernel,
    reference_n: usize,
    rng: &mut R,
) -> Result<KldEstimate> {
    if reference_n < 1_000 {
        return Err(Error::InvalidConfig(format!(
            "reference sample size {reference_n} is too small for a stable estimate (need ≥ 1000)"
        )));
    }
    let config = AuxiliaryProposalConfig::uniform(ancestors)?;
    let base = rng.next_u64();
    // Per draw: log importance weight and −log proposal density.
    let draws: Vec<(f64, f64)> = parallel::map_indexed(reference_n, |i| {
        let mut stream = substream(base, salt::KLD, i as u64);
        let index = config.select(&mut stream);
        let ancestor = &ancestors.particles[index];
        let child = proposal.draw_child(ancestor, &mut stream);
        let log_r = proposal.log_density(ancestor, &child);
        let log_l = kernel.evaluate(ancestor, &child);
        (log_l - log_r, -log_r)
    });
    summarize_weighted_draws(&draws)
}

/// Shared tail of [`estimate_kld`]: reduces (log weight, −log proposal)
/// pairs to the two estimates and their standard errors.
fn summarize_weighted_draws(draws: &[(f64, f64)]) -> Result<KldEstimate> {
    let n = draws.len();
    let peak = draws.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Err(Error::FilterCollapse);
    }
    if !peak.is_finite() {
        return Err(Error::InvalidConfig("non-finite importance weight".into()));
    }
    let scaled: Vec<f64> = draws.iter().map(|d| (d.0 - peak).exp()).collect();
    let total: f64 = scaled.iter().sum();
    let normalized: Vec<f64> = scaled.iter().map(|s| s / total).collect();

    let ess_reference = 1.0 / normalized.iter().map(|w| w * w).sum::<f64>();
    let value: f64 =
        normalized.iter().zip(draws).map(|(w, (_, neg_log_r))| w * neg_log_r).sum();
    let standard_error = normalized
        .iter()
        .zip(draws)
        .map(|(w, (_, neg_log_r))| {
            let deviation = w * (neg_log_r - value);
            deviation * deviation
        })
        .sum::<f64>()
        .sqrt();

    // Pinned form: Σ w̄ log w̄ + log n, i.e. negated weight entropy plus
    // log n; nonnegative by Jensen, zero only at uniform weights.
    let log_n = (n as f64).ln();
    let divergence = (normalized
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| w * w.ln())
        .sum::<f64>()
        + log_n)
        .max(0.0);
    // Delta-method influence of draw m is n·w̄_m(log(n·w̄_m) − d̂ − 1),
    // up to its mean; derived from F(Ā, B̄) = Ā/B̄ − log B̄ with
    // Ā = mean(w log w), B̄ = mean(w).
    let influences: Vec<f64> = normalized
        .iter()
        .map(|w| {
            if *w > 0.0 {
                n as f64 * w * ((n as f64 * w).ln() - divergence - 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let influence_mean = influences.iter().sum::<f64>() / n as f64;
    let divergence_standard_error = influences
        .iter()
        .map(|t| (t - influence_mean) * (t - influence_mean))
        .sum::<f64>()
        .sqrt()
        / n as f64;

    Ok(KldEstimate {
        value_up_to_constant: value,
        standard_error,
        divergence,
        divergence_standard_error,
        reference_sample_size: n,
        unreliable: ess_reference < 10.0,
    })
}

/// Exact divergence d_KL(μ̄ ‖ π) when the proposal kernel is the normalized
/// model kernel and the adjustment is uniform, from per-ancestor partition
/// values L*(ξ_i) = ∫ l(ξ_i, x') dx':
/// Σ_i (ω_i L*_i / Σ ω L*) log L*_i − log(Σ ω L* / Σ ω).
///
/// This is the floor that adapting the proposal kernel alone (ψ fixed at 1)
/// can reach; comparing a fitted mixture's pinned divergence against it
/// shows how much of the gap the mixture closed.
pub fn reference_divergence_from_partition(
    weights: &[f64],
    partition_values: &[f64],
) -> Result<f64> {
    if weights.len() != partition_values.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights vs {} partition values",
            weights.len(),
            partition_values.len()
        )));
    }
    if partition_values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidConfig("partition values must be finite and ≥ 0".into()));
    }
    let weight_total: f64 = weights.iter().sum();
    let mass_total: f64 = weights.iter().zip(partition_values).map(|(w, v)| w * v).sum();
    if !(mass_total > 0.0) || !(weight_total > 0.0) {
        return Err(Error::DegenerateAncestors);
    }
    let mean_log: f64 = weights
        .iter()
        .zip(partition_values)
        .filter(|(_, v)| **v > 0.0)
        .map(|(w, v)| w * v * v.ln())
        .sum::<f64>()
        / mass_total;
    Ok((mean_log - (mass_total / weight_total).ln()).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{GatingParams, MixtureParams, PreparedMixture};
    use crate::rng::substream;
    use crate::selfcheck::oracle;
    use crate::strata::{ExpertParams, StratumFamily};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn dvec(values: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(values)
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&vec![0.37; 100]).unwrap() - 100.0).abs() < 1e-9);
        assert!((ess(&[0.0, 0.0, 5.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((ess(&[1.0, 1.0, 2.0]).unwrap() - 16.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn negated_entropy_examples() {
        assert!((negated_entropy(&[0.25; 4]).unwrap() + 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(negated_entropy(&[0.0, 3.0, 0.0]).unwrap(), 0.0);
        let expected = 0.5 * 0.5f64.ln() + 0.5 * 0.25f64.ln();
        assert!((negated_entropy(&[0.5, 0.25, 0.25]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn coefficient_of_variation_is_zero_for_uniform_weights() {
        assert!(coefficient_of_variation(&[2.0; 8]).unwrap() < 1e-12);
        assert!(coefficient_of_variation(&[1.0, 3.0]).unwrap() > 0.0);
    }

    #[test]
    fn curve_of_uniform_weights_is_the_diagonal() {
        let curve = proportion_curve(&[1.0; 5]).unwrap();
        for (p, m) in curve.particle_fraction.iter().zip(&curve.mass_fraction) {
            assert!((p - m).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_hand_example() {
        let curve = proportion_curve(&[3.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((curve.mass_share_at(0.25) - 0.75).abs() < 1e-12);
        assert_eq!(curve.mass_fraction.last(), Some(&1.0));
        assert!((curve.particle_share_for_mass(0.8) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_particle_curve() {
        let curve = proportion_curve(&[4.0]).unwrap();
        assert_eq!(curve.particle_fraction, vec![0.0, 1.0]);
        assert_eq!(curve.mass_fraction, vec![0.0, 1.0]);
    }

    /// 1-D test kernel l(x, x') = (1 + x²)·N(x'; 0.5x, 0.09): its partition
    /// value L*(x) = 1 + x² varies across ancestors, so the optimal-kernel
    /// divergence floor is strictly positive.
    fn toy_kernel(a: &DVector<f64>, c: &DVector<f64>) -> f64 {
        let var: f64 = 0.09;
        let diff = c[0] - 0.5 * a[0];
        (1.0 + a[0] * a[0]).ln()
            - 0.5 * diff * diff / var
            - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
    }

    fn scalar_mixture(params: &[(f64, f64, f64)], gating: &[f64]) -> MixtureParams {
        let experts = params
            .iter()
            .map(|(slope, intercept, variance)| {
                ExpertParams::new(
                    DMatrix::from_row_slice(1, 2, &[*slope, *intercept]),
                    DMatrix::from_element(1, 1, *variance),
                )
                .unwrap()
            })
            .collect();
        MixtureParams::new(
            GatingParams::Constant(dvec(gating)),
            experts,
            StratumFamily::Gaussian,
            false,
        )
        .unwrap()
    }

    fn toy_ancestors() -> WeightedSample {
        WeightedSample::new(
            vec![dvec(&[-1.2]), dvec(&[-0.3]), dvec(&[0.4]), dvec(&[1.5])],
            vec![0.1, 0.4, 0.3, 0.2],
        )
        .unwrap()
    }

    /// Quadrature versions of both estimates for a scalar proposal density.
    fn quadrature_estimates(
        ancestors: &WeightedSample,
        log_r: impl Fn(f64, f64) -> f64,
    ) -> (f64, f64) {
        let mut mass_total = 0.0;
        let mut value_total = 0.0;
        let mut pinned_total = 0.0;
        let mut weight_total = 0.0;
        for (particle, weight) in ancestors.particles.iter().zip(&ancestors.weights) {
            let x = particle[0];
            let partition = 1.0 + x * x;
            let expect = |f: &dyn Fn(f64) -> f64| {
                oracle::gauss_hermite_expectation(f, 0.5 * x, 0.09, 200)
            };
            let neg_log_r = expect(&|t| -log_r(x, t));
            let log_ratio = expect(&|t| {
                toy_kernel(&dvec(&[x]), &dvec(&[t])) - log_r(x, t)
            });
            mass_total += weight * partition;
            value_total += weight * partition * neg_log_r;
            pinned_total += weight * partition * log_ratio;
            weight_total += weight;
        }
        let value = value_total / mass_total;
        let pinned = pinned_total / mass_total - (mass_total / weight_total).ln();
        (value, pinned)
    }

    #[test]
    fn estimator_matches_quadrature_on_scalar_toy() {
        let ancestors = toy_ancestors();
        let theta = scalar_mixture(&[(0.8, 0.1, 0.2), (0.2, -0.1, 0.5)], &[0.55, 0.45]);
        let prepared = PreparedMixture::new(&theta).unwrap();
        let estimate = estimate_kld(
            &prepared,
            &ancestors,
            &toy_kernel,
            40_000,
            &mut substream(41, 0, 0),
        )
        .unwrap();
        assert!(!estimate.unreliable);
        let (value_q, pinned_q) = quadrature_estimates(&ancestors, |x, t| {
            prepared.log_density(&dvec(&[x]), &dvec(&[t]))
        });
        assert!(
            (estimate.value_up_to_constant - value_q).abs()
                < 3.0 * estimate.standard_error,
            "value {} vs quadrature {value_q} (se {})",
            estimate.value_up_to_constant,
            estimate.standard_error
        );
        assert!(
            (estimate.divergence - pinned_q).abs()
                < 3.0 * estimate.divergence_standard_error.max(1e-4),
            "pinned {} vs quadrature {pinned_q} (se {})",
            estimate.divergence,
            estimate.divergence_standard_error
        );
    }

    #[test]
    fn estimate_differences_are_constant_free() {
        let ancestors = toy_ancestors();
        let theta_a = scalar_mixture(&[(0.8, 0.1, 0.2), (0.2, -0.1, 0.5)], &[0.55, 0.45]);
        let theta_b = scalar_mixture(&[(0.4, 0.0, 0.3)], &[1.0]);
        let prepared_a = PreparedMixture::new(&theta_a).unwrap();
        let prepared_b = PreparedMixture::new(&theta_b).unwrap();
        let est_a = estimate_kld(
            &prepared_a,
            &ancestors,
            &toy_kernel,
            40_000,
            &mut substream(42, 0, 0),
        )
        .unwrap();
        let est_b = estimate_kld(
            &prepared_b,
            &ancestors,
            &toy_kernel,
            40_000,
            &mut substream(43, 0, 0),
        )
        .unwrap();
        let (value_qa, _) = quadrature_estimates(&ancestors, |x, t| {
            prepared_a.log_density(&dvec(&[x]), &dvec(&[t]))
        });
        let (value_qb, _) = quadrature_estimates(&ancestors, |x, t| {
            prepared_b.log_density(&dvec(&[x]), &dvec(&[t]))
        });
        let combined =
            (est_a.standard_error.powi(2) + est_b.standard_error.powi(2)).sqrt();
        let mc_diff = est_a.value_up_to_constant - est_b.value_up_to_constant;
        assert!(
            (mc_diff - (value_qa - value_qb)).abs() < 3.0 * combined,
            "difference {mc_diff} vs quadrature {}",
            value_qa - value_qb
        );
    }

    #[test]
    fn optimal_kernel_attains_the_partition_floor() {
        let ancestors = toy_ancestors();
        // The normalized version of toy_kernel is N(x'; 0.5x, 0.09).
        let optimal = scalar_mixture(&[(0.5, 0.0, 0.09)], &[1.0]);
        let other = scalar_mixture(&[(0.9, 0.2, 0.8)], &[1.0]);
        let prepared_optimal = PreparedMixture::new(&optimal).unwrap();
        let prepared_other = PreparedMixture::new(&other).unwrap();
        let est_optimal = estimate_kld(
            &prepared_optimal,
            &ancestors,
            &toy_kernel,
            40_000,
            &mut substream(44, 0, 0),
        )
        .unwrap();
        let est_other = estimate_kld(
            &prepared_other,
            &ancestors,
            &toy_kernel,
            40_000,
            &mut substream(45, 0, 0),
        )
        .unwrap();
        // Minimality of the optimal kernel, by at least two standard errors.
        let combined =
            (est_optimal.standard_error.powi(2) + est_other.standard_error.powi(2)).sqrt();
        assert!(
            est_optimal.value_up_to_constant
                <= est_other.value_up_to_constant - 2.0 * combined
        );
        // And its pinned divergence sits on the closed-form floor.
        let partition: Vec<f64> =
            ancestors.particles.iter().map(|p| 1.0 + p[0] * p[0]).collect();
        let floor =
            reference_divergence_from_partition(&ancestors.weights, &partition).unwrap();
        assert!(
            (est_optimal.divergence - floor).abs()
                < 3.0 * est_optimal.divergence_standard_error.max(1e-4),
            "pinned {} vs floor {floor}",
            est_optimal.divergence
        );
        assert!(est_other.divergence > floor);
    }

    #[test]
    fn permuted_mixture_gives_identical_estimate() {
        let ancestors = toy_ancestors();
        let theta = scalar_mixture(&[(0.8, 0.1, 0.2), (0.2, -0.1, 0.5)], &[0.55, 0.45]);
        let permuted = scalar_mixture(&[(0.2, -0.1, 0.5), (0.8, 0.1, 0.2)], &[0.45, 0.55]);
        let est_a = estimate_kld(
            &PreparedMixture::new(&theta).unwrap(),
            &ancestors,
            &toy_kernel,
            2_000,
            &mut substream(46, 0, 0),
        )
        .unwrap();
        let est_b = estimate_kld(
            &PreparedMixture::new(&permuted).unwrap(),
            &ancestors,
            &toy_kernel,
            2_000,
            &mut substream(46, 0, 0),
        )
        .unwrap();
        assert_eq!(est_a.value_up_to_constant, est_b.value_up_to_constant);
        assert_eq!(est_a.divergence, est_b.divergence);
    }

    #[test]
    fn tiny_reference_sample_is_rejected() {
        let ancestors = toy_ancestors();
        let theta = scalar_mixture(&[(0.5, 0.0, 0.09)], &[1.0]);
        let result = estimate_kld(
            &PreparedMixture::new(&theta).unwrap(),
            &ancestors,
            &toy_kernel,
            100,
            &mut substream(47, 0, 0),
        );
        assert!(matches!(result, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn constant_partition_floor_is_zero() {
        let floor = reference_divergence_from_partition(&[0.2, 0.5, 0.3], &[2.0, 2.0, 2.0])
            .unwrap();
        assert!(floor.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn scale_invariance_and_bounds(
            weights in proptest::collection::vec(0.0f64..5.0, 2..40),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(weights.iter().any(|w| *w > 0.0));
            let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
            let n = weights.len() as f64;

            let e = ess(&weights).unwrap();
            prop_assert!((ess(&scaled).unwrap() - e).abs() < 1e-6 * e);
            prop_assert!(e >= 1.0 - 1e-12 && e <= n + 1e-9);

            let h = negated_entropy(&weights).unwrap();
            prop_assert!((negated_entropy(&scaled).unwrap() - h).abs() < 1e-9);
            prop_assert!(h <= 0.0 && h >= -n.ln() - 1e-12);
        }

        #[test]
        fn curve_dominates_the_diagonal(
            weights in proptest::collection::vec(0.0f64..5.0, 1..30),
        ) {
            prop_assume!(weights.iter().any(|w| *w > 0.0));
            let curve = proportion_curve(&weights).unwrap();
            for (p, m) in curve.particle_fraction.iter().zip(&curve.mass_fraction) {
                prop_assert!(*m >= *p - 1e-12);
            }
            for pair in curve.mass_fraction.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-15);
            }
        }
    }
}
