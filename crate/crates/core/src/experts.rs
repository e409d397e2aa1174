//! Mixture-of-experts proposal kernels.
//!
//! The proposal density at ancestor x is r_θ(x, x') = Σ_j α_j(x) ρ_j(x, x'),
//! a mixture of strata whose weights α may depend on the ancestor through a
//! multinomial logistic map. Together with an adjustment function ψ over a
//! weighted ancestor sample this forms the auxiliary proposal
//! π(i, x') ∝ ω_i ψ(ξ_i) r_θ(ξ_i, x'), and the importance weight of a drawn
//! pair is l(ξ_i, x') / (ψ(ξ_i) r_θ(ξ_i, x')).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{salt, substream};
use crate::sample::WeightedSample;
use crate::strata::{extended, ExpertParams, PreparedStratum, StratumFamily};
use crate::warnings;

/// How the mixture weights respond to the ancestor state.
#[derive(Debug, Clone, PartialEq)]
pub enum GatingParams {
    /// Fixed simplex of length d, independent of the ancestor.
    Constant(DVector<f64>),
    /// Multinomial logistic coefficients, one row per non-reference
    /// component: (d−1) × (p+1), acting on the extended ancestor. The last
    /// component is the reference with logit zero.
    Logistic(DMatrix<f64>),
}

impl GatingParams {
    pub fn n_components(&self) -> usize {
        match self {
            GatingParams::Constant(simplex) => simplex.len(),
            GatingParams::Logistic(beta) => beta.nrows() + 1,
        }
    }

    pub fn validate(&self, n_components: usize, ancestor_dim: usize) -> Result<()> {
        match self {
            GatingParams::Constant(simplex) => {
                if simplex.len() != n_components {
                    return Err(Error::DimensionMismatch(format!(
                        "{} gating weights for {} experts",
                        simplex.len(),
                        n_components
                    )));
                }
                if simplex.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(Error::InvalidConfig(
                        "gating weights must be finite and nonnegative".into(),
                    ));
                }
                if (simplex.sum() - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidConfig(format!(
                        "gating weights sum to {}, not 1",
                        simplex.sum()
                    )));
                }
            }
            GatingParams::Logistic(beta) => {
                if beta.nrows() + 1 != n_components || beta.ncols() != ancestor_dim + 1 {
                    return Err(Error::DimensionMismatch(format!(
                        "logistic gating {}x{} for {} experts on ancestor dim {}",
                        beta.nrows(),
                        beta.ncols(),
                        n_components,
                        ancestor_dim
                    )));
                }
                if beta.iter().any(|b| !b.is_finite()) {
                    return Err(Error::InvalidConfig("gating coefficients must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Weight simplex α(x) at one ancestor. Logistic logits are shifted by their
/// maximum before exponentiation, so no input overflows.
pub fn gating_weights(gating: &GatingParams, ancestor: &DVector<f64>) -> DVector<f64> {
    match gating {
        GatingParams::Constant(simplex) => simplex.clone(),
        GatingParams::Logistic(beta) => {
            let d = beta.nrows() + 1;
            let xbar = extended(ancestor);
            let mut logits = DVector::zeros(d);
            logits.rows_mut(0, d - 1).gemv(1.0, beta, &xbar, 0.0);
            let shift = logits.max();
            let mut weights = logits.map(|z| (z - shift).exp());
            weights /= weights.sum();
            weights
        }
    }
}

/// Full parameter set of one mixture proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub gating: GatingParams,
    pub experts: Vec<ExpertParams>,
    pub family: StratumFamily,
    /// All experts share one covariance matrix (kept equal by the M-step).
    pub pooled: bool,
}

impl MixtureParams {
    pub fn new(
        gating: GatingParams,
        experts: Vec<ExpertParams>,
        family: StratumFamily,
        pooled: bool,
    ) -> Result<Self> {
        let params = Self { gating, experts, family, pooled };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        let Some(first) = self.experts.first() else {
            return Err(Error::InvalidConfig("mixture needs at least one expert".into()));
        };
        for expert in &self.experts {
            expert.validate()?;
            if expert.child_dim() != first.child_dim()
                || expert.ancestor_dim() != first.ancestor_dim()
            {
                return Err(Error::DimensionMismatch("experts disagree on dimensions".into()));
            }
        }
        self.gating.validate(self.experts.len(), first.ancestor_dim())?;
        if self.pooled {
            for expert in &self.experts[1..] {
                let gap = (&expert.covariance - &first.covariance).amax();
                if gap > 1e-12 * first.covariance.amax().max(1.0) {
                    return Err(Error::InvalidConfig(
                        "pooled mixture with unequal covariances".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.experts.len()
    }

    pub fn child_dim(&self) -> usize {
        self.experts[0].child_dim()
    }

    pub fn ancestor_dim(&self) -> usize {
        self.experts[0].ancestor_dim()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let gating = match &self.gating {
            GatingParams::Constant(simplex) => serde_json::json!({
                "kind": "constant",
                "weights": simplex.iter().copied().collect::<Vec<f64>>(),
            }),
            GatingParams::Logistic(beta) => serde_json::json!({
                "kind": "logistic",
                "coefficients": matrix_rows(beta),
            }),
        };
        let family = match self.family {
            StratumFamily::Gaussian => serde_json::json!({"kind": "gaussian"}),
            StratumFamily::StudentT { dof } => {
                serde_json::json!({"kind": "student_t", "dof": dof})
            }
        };
        let experts: Vec<serde_json::Value> = self
            .experts
            .iter()
            .map(|e| {
                serde_json::json!({
                    "regression": matrix_rows(&e.regression),
                    "covariance": matrix_rows(&e.covariance),
                })
            })
            .collect();
        serde_json::json!({
            "gating": gating,
            "experts": experts,
            "family": family,
            "pooled": self.pooled,
        })
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// A mixture with every expert covariance factored once.
#[derive(Debug, Clone)]
pub struct PreparedMixture {
    gating: GatingParams,
    strata: Vec<PreparedStratum>,
    family: StratumFamily,
    child_dim: usize,
    ancestor_dim: usize,
    /// Component indices sorted by parameter value. Sampling walks this
    /// order, so two mixtures equal up to a permutation of their experts
    /// draw identical children from identical generator states.
    selection_order: Vec<usize>,
}

fn canonical_order(experts: &[ExpertParams]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..experts.len()).collect();
    fn key(e: &ExpertParams) -> impl Iterator<Item = &f64> {
        e.regression.iter().chain(e.covariance.iter())
    }
    order.sort_by(|&a, &b| {
        for (x, y) in key(&experts[a]).zip(key(&experts[b])) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                unequal => return unequal,
            }
        }
        std::cmp::Ordering::Equal
    });
    order
}

impl PreparedMixture {
    pub fn new(params: &MixtureParams) -> Result<Self> {
        params.validate()?;
        let strata = params
            .experts
            .iter()
            .map(|e| PreparedStratum::new(e, params.family))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gating: params.gating.clone(),
            strata,
            family: params.family,
            child_dim: params.child_dim(),
            ancestor_dim: params.ancestor_dim(),
            selection_order: canonical_order(&params.experts),
        })
    }

    pub fn n_components(&self) -> usize {
        self.strata.len()
    }

    pub fn child_dim(&self) -> usize {
        self.child_dim
    }

    pub fn ancestor_dim(&self) -> usize {
        self.ancestor_dim
    }

    pub fn family(&self) -> StratumFamily {
        self.family
    }

    pub fn gating(&self) -> &GatingParams {
        &self.gating
    }

    pub fn gating_weights(&self, ancestor: &DVector<f64>) -> DVector<f64> {
        gating_weights(&self.gating, ancestor)
    }

    /// Per-component (log density, Mahalanobis distance) at one pair.
    pub(crate) fn component_terms(
        &self,
        ancestor: &DVector<f64>,
        child: &DVector<f64>,
    ) -> Vec<(f64, f64)> {
        let xbar = extended(ancestor);
        self.strata
            .iter()
            .map(|stratum| stratum.log_density_and_maha(&stratum.mean(&xbar), child))
            .collect()
    }

    pub(crate) fn expected_latent_scale(&self, component: usize, maha: f64) -> f64 {
        self.strata[component].expected_latent_scale_from_maha(maha)
    }

    /// log r_θ(ancestor, child) = log Σ_j α_j ρ_j, by log-sum-exp.
    pub fn log_density(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64 {
        let alpha = self.gating_weights(ancestor);
        let terms = self.component_terms(ancestor, child);
        log_mixture(&alpha, &terms)
    }

    /// Posterior component probabilities given the pair, and whether the
    /// underflow fallback to the gating weights fired.
    pub fn responsibilities(
        &self,
        ancestor: &DVector<f64>,
        child: &DVector<f64>,
    ) -> (DVector<f64>, bool) {
        let alpha = self.gating_weights(ancestor);
        let terms = self.component_terms(ancestor, child);
        self.responsibilities_from(&alpha, &terms)
    }

    /// Same, reusing already computed gating weights and component terms.
    pub(crate) fn responsibilities_from(
        &self,
        alpha: &DVector<f64>,
        terms: &[(f64, f64)],
    ) -> (DVector<f64>, bool) {
        let joint: Vec<f64> = alpha
            .iter()
            .zip(terms)
            .map(|(a, (log_density, _))| {
                if *a > 0.0 { a.ln() + log_density } else { f64::NEG_INFINITY }
            })
            .collect();
        let peak = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            // Every stratum density underflowed; the Bayes ratio of equal
            // densities degenerates to the prior over components.
            warnings::bump(&warnings::RESPONSIBILITY_UNDERFLOW);
            return (alpha.clone(), true);
        }
        let mut resp = DVector::from_iterator(joint.len(), joint.iter().map(|v| (v - peak).exp()));
        resp /= resp.sum();
        (resp, false)
    }

    /// Draws (component index, child) at one ancestor.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        ancestor: &DVector<f64>,
        rng: &mut R,
    ) -> (usize, DVector<f64>) {
        let alpha = self.gating_weights(ancestor);
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        let mut component = None;
        for &j in &self.selection_order {
            if alpha[j] == 0.0 {
                continue;
            }
            cumulative += alpha[j];
            component = Some(j);
            if u < cumulative {
                break;
            }
        }
        // alpha is a simplex, so some component has positive weight; the
        // loop can only run through when u sits in the rounding gap at 1.
        let component = component.expect("gating weights sum to one");
        let xbar = extended(ancestor);
        let child = self.strata[component].draw(&self.strata[component].mean(&xbar), rng);
        (component, child)
    }

    /// Draws n auxiliary pairs (ancestor index, child). Work is split across
    /// draw-index substreams, so the output is identical for any thread
    /// count; the caller's generator is consumed only for the base seed.
    pub fn propose<R: Rng + ?Sized>(
        &self,
        config: &AuxiliaryProposalConfig,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<ProposedPair>> {
        if config.ancestors().dim() != self.ancestor_dim {
            return Err(Error::DimensionMismatch(format!(
                "ancestors of dim {} proposed through a mixture over dim {}",
                config.ancestors().dim(),
                self.ancestor_dim
            )));
        }
        let base = rng.next_u64();
        Ok(parallel::map_indexed(n, |i| {
            let mut stream = substream(base, salt::PROPOSE, i as u64);
            let ancestor_index = config.select(&mut stream);
            let (component, child) =
                self.draw(&config.ancestors().particles[ancestor_index], &mut stream);
            ProposedPair { ancestor_index, component, child }
        }))
    }

    /// w = l(ξ_i, child) / (ψ(ξ_i) · r_θ(ξ_i, child)), assembled in log space.
    pub fn importance_weight(
        &self,
        kernel: &dyn LogKernel,
        config: &AuxiliaryProposalConfig,
        ancestor_index: usize,
        child: &DVector<f64>,
    ) -> Result<f64> {
        let ancestor = &config.ancestors().particles[ancestor_index];
        let log_kernel = kernel.evaluate(ancestor, child);
        if log_kernel == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        let log_proposal = self.log_density(ancestor, child);
        if log_proposal == f64::NEG_INFINITY {
            return Err(Error::AbsoluteContinuityViolation { log_kernel });
        }
        Ok((log_kernel - config.adjustment(ancestor_index).ln() - log_proposal).exp())
    }
}

fn log_mixture(alpha: &DVector<f64>, terms: &[(f64, f64)]) -> f64 {
    let joint: Vec<f64> = alpha
        .iter()
        .zip(terms)
        .map(|(a, (log_density, _))| {
            if *a > 0.0 { a.ln() + log_density } else { f64::NEG_INFINITY }
        })
        .collect();
    let peak = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return f64::NEG_INFINITY;
    }
    peak + joint.iter().map(|v| (v - peak).exp()).sum::<f64>().ln()
}

/// One proposed pair; the component index is exposed purely for tests and
/// never enters any weight (weights use the full mixture density).
#[derive(Debug, Clone)]
pub struct ProposedPair {
    pub ancestor_index: usize,
    pub child: DVector<f64>,
    pub component: usize,
}

/// Log of the unnormalized model kernel l(x, x') = g(x', y)·q(x, x') at the
/// current observation. Return −∞ where l vanishes.
pub trait LogKernel: Sync {
    fn evaluate(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64;
}

impl<F> LogKernel for F
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync,
{
    fn evaluate(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64 {
        self(ancestor, child)
    }
}

/// A conditional proposal kernel: a log density plus a matching sampler.
/// Implemented by prepared mixtures and by model-supplied prior and optimal
/// kernels, so filters and divergence estimates treat them uniformly.
pub trait ProposalKernel: Sync {
    fn log_density(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64;
    fn draw_child(&self, ancestor: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64>;
}

impl ProposalKernel for PreparedMixture {
    fn log_density(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64 {
        PreparedMixture::log_density(self, ancestor, child)
    }

    fn draw_child(&self, ancestor: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64> {
        self.draw(ancestor, rng).1
    }
}

/// An ancestor sample with adjustment weights ψ evaluated and the selection
/// law ∝ ω_i ψ(ξ_i) tabulated.
pub struct AuxiliaryProposalConfig<'a> {
    ancestors: &'a WeightedSample,
    adjustment: Vec<f64>,
    cumulative: Vec<f64>,
    total: f64,
}

impl<'a> AuxiliaryProposalConfig<'a> {
    pub fn new(
        ancestors: &'a WeightedSample,
        adjustment: impl Fn(&DVector<f64>) -> f64,
    ) -> Result<Self> {
        let psi: Vec<f64> = ancestors.particles.iter().map(adjustment).collect();
        if psi.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "adjustment weights must be finite and nonnegative".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(psi.len());
        let mut total = 0.0;
        for (w, p) in ancestors.weights.iter().zip(&psi) {
            total += w * p;
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::DegenerateAncestors);
        }
        Ok(Self { ancestors, adjustment: psi, cumulative, total })
    }

    /// Bootstrap-style ψ ≡ 1.
    pub fn uniform(ancestors: &'a WeightedSample) -> Result<Self> {
        Self::new(ancestors, |_| 1.0)
    }

    pub fn ancestors(&self) -> &WeightedSample {
        self.ancestors
    }

    pub fn adjustment(&self, index: usize) -> f64 {
        self.adjustment[index]
    }

    /// Normalized selection probabilities ω_i ψ_i / Σ ω ψ.
    pub fn selection_probabilities(&self) -> Vec<f64> {
        let mut previous = 0.0;
        self.cumulative
            .iter()
            .map(|c| {
                let p = (c - previous) / self.total;
                previous = *c;
                p
            })
            .collect()
    }

    /// One index draw from the selection law.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() * self.total;
        self.cumulative.partition_point(|c| *c <= u).min(self.cumulative.len() - 1)
    }
}

/// Free-function forms of the mixture operations, for one-off evaluation;
/// loops should prepare once.
pub fn proposal_log_density(
    theta: &MixtureParams,
    ancestor: &DVector<f64>,
    child: &DVector<f64>,
) -> Result<f64> {
    Ok(PreparedMixture::new(theta)?.log_density(ancestor, child))
}

pub fn responsibilities(
    theta: &MixtureParams,
    ancestor: &DVector<f64>,
    child: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(PreparedMixture::new(theta)?.responsibilities(ancestor, child).0)
}

pub fn propose<R: Rng + ?Sized>(
    theta: &MixtureParams,
    config: &AuxiliaryProposalConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ProposedPair>> {
    PreparedMixture::new(theta)?.propose(config, n, rng)
}

pub fn importance_weight(
    theta: &MixtureParams,
    kernel: &dyn LogKernel,
    config: &AuxiliaryProposalConfig,
    ancestor_index: usize,
    child: &DVector<f64>,
) -> Result<f64> {
    PreparedMixture::new(theta)?.importance_weight(kernel, config, ancestor_index, child)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::selfcheck::oracle;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dvec(values: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(values)
    }

    fn sn(rng: &mut impl Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn scalar_expert(slope: f64, intercept: f64, variance: f64) -> ExpertParams {
        ExpertParams::new(
            DMatrix::from_row_slice(1, 2, &[slope, intercept]),
            DMatrix::from_element(1, 1, variance),
        )
        .unwrap()
    }

    fn random_mixture(d: usize, rng: &mut impl Rng) -> MixtureParams {
        let experts = (0..d)
            .map(|_| {
                let regression = DMatrix::from_fn(2, 3, |_, _| sn(rng));
                let g: DMatrix<f64> = DMatrix::from_fn(2, 2, |_, _| sn(rng));
                let covariance = &g * g.transpose() + DMatrix::identity(2, 2) * 0.4;
                ExpertParams::new(regression, covariance).unwrap()
            })
            .collect();
        let beta = DMatrix::from_fn(d - 1, 3, |_, _| 0.5 * sn(rng));
        MixtureParams::new(GatingParams::Logistic(beta), experts, StratumFamily::Gaussian, false)
            .unwrap()
    }

    #[test]
    fn zero_coefficients_give_uniform_gating() {
        let gating = GatingParams::Logistic(DMatrix::zeros(3, 4));
        let weights = gating_weights(&gating, &dvec(&[1.0, -2.0, 0.5]));
        for w in weights.iter() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn intercept_only_gating_is_scalar_logistic() {
        let c = 1.3;
        let gating = GatingParams::Logistic(DMatrix::from_row_slice(1, 3, &[0.0, 0.0, c]));
        let weights = gating_weights(&gating, &dvec(&[5.0, -7.0]));
        let sigma = 1.0 / (1.0 + (-c as f64).exp());
        assert!((weights[0] - sigma).abs() < 1e-14);
        assert!((weights[1] - (1.0 - sigma)).abs() < 1e-14);
    }

    #[test]
    fn gating_matches_naive_softmax() {
        let mut rng = substream(21, 0, 0);
        let beta = DMatrix::from_fn(3, 3, |_, _| sn(&mut rng));
        let ancestor = dvec(&[0.3, -1.1]);
        let weights = gating_weights(&GatingParams::Logistic(beta.clone()), &ancestor);
        let xbar = [0.3, -1.1, 1.0];
        let mut naive = [0.0; 4];
        for j in 0..3 {
            let logit: f64 = (0..3).map(|k| beta[(j, k)] * xbar[k]).sum();
            naive[j] = logit.exp();
        }
        naive[3] = 1.0;
        let total: f64 = naive.iter().sum();
        for j in 0..4 {
            assert!((weights[j] - naive[j] / total).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let gating = GatingParams::Logistic(DMatrix::from_row_slice(1, 2, &[0.0, 2000.0]));
        let weights = gating_weights(&gating, &dvec(&[0.0]));
        assert!((weights[0] - 1.0).abs() < 1e-12);
        assert!(weights[1] >= 0.0 && weights.sum().is_finite());
    }

    #[test]
    fn single_component_density_equals_stratum() {
        let expert = scalar_expert(0.5, 0.0, 0.09);
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[1.0])),
            vec![expert.clone()],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let (a, c) = (dvec(&[0.8]), dvec(&[0.1]));
        let mixture = proposal_log_density(&theta, &a, &c).unwrap();
        let stratum =
            crate::strata::log_density(&expert, StratumFamily::Gaussian, &a, &c).unwrap();
        assert_eq!(mixture, stratum);
    }

    #[test]
    fn identical_components_collapse_to_one() {
        let expert = scalar_expert(-0.2, 0.4, 0.5);
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[0.3, 0.7])),
            vec![expert.clone(), expert.clone()],
            StratumFamily::StudentT { dof: 4.0 },
            false,
        )
        .unwrap();
        let (a, c) = (dvec(&[-1.0]), dvec(&[0.9]));
        let mixture = proposal_log_density(&theta, &a, &c).unwrap();
        let stratum =
            crate::strata::log_density(&expert, StratumFamily::StudentT { dof: 4.0 }, &a, &c)
                .unwrap();
        assert!((mixture - stratum).abs() < 1e-13);
    }

    #[test]
    fn mixture_density_matches_linear_space_sum() {
        let mut rng = substream(22, 0, 0);
        let theta = random_mixture(3, &mut rng);
        let prepared = PreparedMixture::new(&theta).unwrap();
        for _ in 0..20 {
            let ancestor = DVector::from_fn(2, |_, _| sn(&mut rng));
            let child = DVector::from_fn(2, |_, _| sn(&mut rng));
            let alpha = prepared.gating_weights(&ancestor);
            let mut linear = 0.0;
            for (j, expert) in theta.experts.iter().enumerate() {
                linear += alpha[j]
                    * crate::strata::log_density(expert, theta.family, &ancestor, &child)
                        .unwrap()
                        .exp();
            }
            let ours = prepared.log_density(&ancestor, &child);
            assert!((ours - linear.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn density_is_invariant_under_component_permutation() {
        let mut rng = substream(23, 0, 0);
        let experts: Vec<ExpertParams> =
            (0..3).map(|k| scalar_expert(0.2 * k as f64, -0.1, 0.3 + 0.2 * k as f64)).collect();
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[0.5, 0.3, 0.2])),
            experts.clone(),
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let permuted = MixtureParams::new(
            GatingParams::Constant(dvec(&[0.2, 0.5, 0.3])),
            vec![experts[2].clone(), experts[0].clone(), experts[1].clone()],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        for _ in 0..10 {
            let a = dvec(&[sn(&mut rng)]);
            let c = dvec(&[sn(&mut rng)]);
            let lhs = proposal_log_density(&theta, &a, &c).unwrap();
            let rhs = proposal_log_density(&permuted, &a, &c).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn single_component_responsibility_is_one() {
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[1.0])),
            vec![scalar_expert(0.1, 0.0, 1.0)],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let resp = responsibilities(&theta, &dvec(&[0.0]), &dvec(&[2.0])).unwrap();
        assert_eq!(resp[0], 1.0);
    }

    #[test]
    fn identical_experts_get_gating_responsibilities() {
        let expert = scalar_expert(0.4, 0.2, 0.6);
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[0.25, 0.75])),
            vec![expert.clone(), expert],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let resp = responsibilities(&theta, &dvec(&[1.0]), &dvec(&[0.3])).unwrap();
        assert!((resp[0] - 0.25).abs() < 1e-13);
        assert!((resp[1] - 0.75).abs() < 1e-13);
    }

    #[test]
    fn responsibilities_match_linear_bayes_ratio() {
        let e1 = scalar_expert(0.5, 0.0, 0.2);
        let e2 = scalar_expert(-0.3, 1.0, 0.8);
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[0.6, 0.4])),
            vec![e1.clone(), e2.clone()],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let (a, c) = (dvec(&[0.7]), dvec(&[0.5]));
        let d1 =
            0.6 * crate::strata::log_density(&e1, StratumFamily::Gaussian, &a, &c).unwrap().exp();
        let d2 =
            0.4 * crate::strata::log_density(&e2, StratumFamily::Gaussian, &a, &c).unwrap().exp();
        let resp = responsibilities(&theta, &a, &c).unwrap();
        assert!((resp[0] - d1 / (d1 + d2)).abs() < 1e-10);
        assert!((resp[1] - d2 / (d1 + d2)).abs() < 1e-10);
    }

    #[test]
    fn underflow_falls_back_to_gating_weights() {
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[0.9, 0.1])),
            vec![scalar_expert(0.0, 0.0, 1e-160), scalar_expert(0.0, 0.0, 1e-160)],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let before = warnings::count(&warnings::RESPONSIBILITY_UNDERFLOW);
        let resp = responsibilities(&theta, &dvec(&[0.0]), &dvec(&[1e160])).unwrap();
        assert_eq!((resp[0], resp[1]), (0.9, 0.1));
        assert!(warnings::count(&warnings::RESPONSIBILITY_UNDERFLOW) > before);
    }

    #[test]
    fn propose_single_ancestor_single_component() {
        let population = WeightedSample::uniform(vec![dvec(&[0.5])]).unwrap();
        let config = AuxiliaryProposalConfig::uniform(&population).unwrap();
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[1.0])),
            vec![scalar_expert(1.0, 0.0, 0.5)],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let mut rng = substream(24, 0, 0);
        let pairs = propose(&theta, &config, 200, &mut rng).unwrap();
        assert!(pairs.iter().all(|p| p.ancestor_index == 0 && p.component == 0));
        assert!(pairs.iter().all(|p| p.child[0].is_finite()));
    }

    #[test]
    fn propose_respects_selection_law() {
        let population =
            WeightedSample::new(vec![dvec(&[0.0]), dvec(&[1.0])], vec![1.0, 1.0]).unwrap();
        // ψ gives the first ancestor three times the mass of the second.
        let config =
            AuxiliaryProposalConfig::new(&population, |x| if x[0] < 0.5 { 3.0 } else { 1.0 })
                .unwrap();
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[1.0])),
            vec![scalar_expert(0.0, 0.0, 1.0)],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let n = 100_000;
        let mut rng = substream(25, 0, 0);
        let pairs = propose(&theta, &config, n, &mut rng).unwrap();
        let first = pairs.iter().filter(|p| p.ancestor_index == 0).count() as f64 / n as f64;
        let sigma = (0.75 * 0.25 / n as f64).sqrt();
        assert!((first - 0.75).abs() < 3.0 * sigma, "frequency {first}");
    }

    #[test]
    fn propose_respects_constant_gating() {
        let population = WeightedSample::uniform(vec![dvec(&[0.0])]).unwrap();
        let config = AuxiliaryProposalConfig::uniform(&population).unwrap();
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[0.9, 0.1])),
            vec![scalar_expert(0.0, -1.0, 0.3), scalar_expert(0.0, 1.0, 0.3)],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let n = 100_000;
        let mut rng = substream(26, 0, 0);
        let pairs = propose(&theta, &config, n, &mut rng).unwrap();
        let first = pairs.iter().filter(|p| p.component == 0).count() as f64 / n as f64;
        let sigma = (0.9 * 0.1 / n as f64).sqrt();
        assert!((first - 0.9).abs() < 3.0 * sigma, "frequency {first}");
    }

    #[test]
    fn propose_is_reproducible_from_the_seed() {
        let population = WeightedSample::new(
            vec![dvec(&[0.0, 1.0]), dvec(&[2.0, -1.0])],
            vec![0.4, 0.6],
        )
        .unwrap();
        let config = AuxiliaryProposalConfig::uniform(&population).unwrap();
        let mut rng = substream(27, 0, 0);
        let theta = random_mixture(2, &mut rng);
        let population2 = population.clone();
        let config2 = AuxiliaryProposalConfig::uniform(&population2).unwrap();
        let a = propose(&theta, &config, 777, &mut substream(9, 9, 9)).unwrap();
        let b = propose(&theta, &config2, 777, &mut substream(9, 9, 9)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ancestor_index, y.ancestor_index);
            assert_eq!(x.component, y.component);
            assert_eq!(x.child, y.child);
        }
    }

    #[test]
    fn propose_rejects_mismatched_dimensions() {
        let population = WeightedSample::uniform(vec![dvec(&[0.0])]).unwrap();
        let config = AuxiliaryProposalConfig::uniform(&population).unwrap();
        let mut rng = substream(32, 0, 0);
        let theta = random_mixture(2, &mut rng);
        let result = propose(&theta, &config, 5, &mut rng);
        assert!(matches!(result, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn proposed_children_match_mixture_law() {
        // ψ ≡ 1 and uniform ancestor weights: the child marginal is the
        // ancestor-averaged mixture density.
        let population =
            WeightedSample::uniform(vec![dvec(&[-0.5]), dvec(&[0.5])]).unwrap();
        let config = AuxiliaryProposalConfig::uniform(&population).unwrap();
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[0.3, 0.7])),
            vec![scalar_expert(1.0, -0.5, 0.4), scalar_expert(-1.0, 0.8, 0.9)],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let n = 100_000;
        let mut rng = substream(28, 0, 0);
        let pairs = propose(&theta, &config, n, &mut rng).unwrap();
        let mut draws: Vec<f64> = pairs.iter().map(|p| p.child[0]).collect();
        let cdf = |t: f64| {
            let mut total = 0.0;
            for ancestor in [-0.5, 0.5] {
                for (alpha, expert) in
                    [(0.3, &theta.experts[0]), (0.7, &theta.experts[1])]
                {
                    let mean = expert.regression[(0, 0)] * ancestor + expert.regression[(0, 1)];
                    let sd = expert.covariance[(0, 0)].sqrt();
                    total += 0.5 * alpha * oracle::normal_cdf((t - mean) / sd);
                }
            }
            total
        };
        let statistic = oracle::ks_statistic(&mut draws, cdf);
        let critical = 1.628 / (n as f64).sqrt();
        assert!(statistic < critical, "KS {statistic} vs {critical}");
    }

    #[test]
    fn full_adaptation_makes_weights_constant() {
        // Kernel l(x,x') = 2·N(x'; 0.5x + 0.1, 0.49): the normalized kernel
        // is the single expert below and the partition value is 2.
        let kernel = |a: &DVector<f64>, c: &DVector<f64>| {
            let diff = c[0] - 0.5 * a[0] - 0.1;
            2.0f64.ln() - 0.5 * (diff * diff / 0.49) - 0.5 * (0.49f64 * 2.0 * std::f64::consts::PI).ln()
        };
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[1.0])),
            vec![scalar_expert(0.5, 0.1, 0.49)],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let population =
            WeightedSample::new(vec![dvec(&[-1.0]), dvec(&[3.0])], vec![0.25, 0.75]).unwrap();
        let config = AuxiliaryProposalConfig::new(&population, |_| 2.0).unwrap();
        let prepared = PreparedMixture::new(&theta).unwrap();
        let mut rng = substream(29, 0, 0);
        let pairs = prepared.propose(&config, 50, &mut rng).unwrap();
        let weights: Vec<f64> = pairs
            .iter()
            .map(|p| {
                prepared
                    .importance_weight(&kernel, &config, p.ancestor_index, &p.child)
                    .unwrap()
            })
            .collect();
        for w in &weights {
            assert!((w - 1.0).abs() < 1e-12, "weight {w}");
        }
    }

    #[test]
    fn vanishing_kernel_gives_zero_weight() {
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[1.0])),
            vec![scalar_expert(0.0, 0.0, 1.0)],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let population = WeightedSample::uniform(vec![dvec(&[0.0])]).unwrap();
        let config = AuxiliaryProposalConfig::uniform(&population).unwrap();
        let kernel = |_: &DVector<f64>, _: &DVector<f64>| f64::NEG_INFINITY;
        let w = importance_weight(&theta, &kernel, &config, 0, &dvec(&[0.2])).unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn weight_matches_direct_ratio() {
        let mut rng = substream(30, 0, 0);
        let theta = random_mixture(2, &mut rng);
        let population = WeightedSample::uniform(vec![dvec(&[0.2, -0.4])]).unwrap();
        let config = AuxiliaryProposalConfig::new(&population, |_| 1.7).unwrap();
        let kernel = |a: &DVector<f64>, c: &DVector<f64>| -0.3 * (a - c).norm_squared() + 0.25;
        let child = dvec(&[0.5, 0.1]);
        let ours = importance_weight(&theta, &kernel, &config, 0, &child).unwrap();
        let ancestor = dvec(&[0.2, -0.4]);
        let density = proposal_log_density(&theta, &ancestor, &child).unwrap().exp();
        let direct = kernel(&ancestor, &child).exp() / (1.7 * density);
        assert!((ours - direct).abs() < 1e-10 * direct);
    }

    #[test]
    fn weight_ignores_common_ancestor_weight_scale() {
        let mut rng = substream(31, 0, 0);
        let theta = random_mixture(2, &mut rng);
        let particles = vec![dvec(&[0.2, -0.4]), dvec(&[1.0, 0.3])];
        let small = WeightedSample::new(particles.clone(), vec![0.1, 0.3]).unwrap();
        let large = WeightedSample::new(particles, vec![100.0, 300.0]).unwrap();
        let kernel = |_: &DVector<f64>, c: &DVector<f64>| -0.5 * c.norm_squared();
        let child = dvec(&[0.4, 0.4]);
        let w_small = importance_weight(
            &theta,
            &kernel,
            &AuxiliaryProposalConfig::uniform(&small).unwrap(),
            1,
            &child,
        )
        .unwrap();
        let w_large = importance_weight(
            &theta,
            &kernel,
            &AuxiliaryProposalConfig::uniform(&large).unwrap(),
            1,
            &child,
        )
        .unwrap();
        assert_eq!(w_small, w_large);
    }

    #[test]
    fn unreachable_child_with_live_kernel_is_an_error() {
        let theta = MixtureParams::new(
            GatingParams::Constant(dvec(&[1.0])),
            vec![scalar_expert(0.0, 0.0, 1e-300)],
            StratumFamily::Gaussian,
            false,
        )
        .unwrap();
        let population = WeightedSample::uniform(vec![dvec(&[0.0])]).unwrap();
        let config = AuxiliaryProposalConfig::uniform(&population).unwrap();
        let kernel = |_: &DVector<f64>, _: &DVector<f64>| 0.0;
        let result = importance_weight(&theta, &kernel, &config, 0, &dvec(&[1e160]));
        assert!(matches!(result, Err(Error::AbsoluteContinuityViolation { .. })));
    }

    #[test]
    fn zero_selection_mass_is_rejected() {
        let population =
            WeightedSample::new(vec![dvec(&[0.0]), dvec(&[1.0])], vec![1.0, 1.0]).unwrap();
        let result = AuxiliaryProposalConfig::new(&population, |_| 0.0);
        assert!(matches!(result, Err(Error::DegenerateAncestors)));
    }

    proptest! {
        #[test]
        fn gating_weights_form_a_simplex(
            entries in proptest::collection::vec(-30.0f64..30.0, 6),
            x in -10.0f64..10.0, y in -10.0f64..10.0,
        ) {
            let beta = DMatrix::from_row_slice(2, 3, &entries);
            let weights = gating_weights(&GatingParams::Logistic(beta), &dvec(&[x, y]));
            prop_assert!(weights.iter().all(|w| *w >= 0.0));
            prop_assert!((weights.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn responsibilities_form_a_simplex(
            slope in -2.0f64..2.0, child in -20.0f64..20.0,
        ) {
            let theta = MixtureParams::new(
                GatingParams::Constant(dvec(&[0.5, 0.5])),
                vec![scalar_expert(slope, 0.0, 0.4), scalar_expert(-slope, 0.3, 1.3)],
                StratumFamily::Gaussian,
                false,
            ).unwrap();
            let resp = responsibilities(&theta, &dvec(&[1.0]), &dvec(&[child])).unwrap();
            prop_assert!(resp.iter().all(|r| *r >= 0.0));
            prop_assert!((resp.sum() - 1.0).abs() < 1e-12);
        }
    }
}
