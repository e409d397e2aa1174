//! Stochastic-approximation EM for the proposal mixture.
//!
//! The mixture is a curved exponential family, so the E-step reduces to
//! expected sufficient statistics under the auxiliary target. Those
//! expectations are estimated by self-normalized importance sampling from
//! the current proposal, smoothed across iterations by a Robbins-Monro
//! recursion together with a scalar recursion for the normalizing constant,
//! and turned back into parameters by closed-form M-steps (plus one Newton
//! step for logistic gating coefficients).

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::diagnostics::{estimate_kld, KldEstimate};
use crate::error::{Error, Result};
use crate::experts::{
    AuxiliaryProposalConfig, GatingParams, LogKernel, MixtureParams, PreparedMixture,
    ProposalKernel,
};
use crate::linalg;
use crate::parallel;
use crate::rng::{salt, substream};
use crate::sample::{normalize_weights, WeightedSample};
use crate::strata::{extended, ExpertSuffStat, StratumFamily};
use crate::warnings;

/// Running state of the stochastic approximation: per-expert moment blocks
/// `s`, responsibility masses `p`, logistic gradient/Hessian statistics
/// `t`/`v` (present only in logistic gating mode), and the normalizing
/// constant iterate `c`. A fresh state has c = 0 until the first update,
/// which is absorbed with step size one.
#[derive(Debug, Clone)]
pub struct SuffStats {
    pub s: Vec<ExpertSuffStat>,
    pub p: Vec<f64>,
    /// Gradient statistic, one row per non-reference component: (d−1)×(p+1).
    pub t: Option<DMatrix<f64>>,
    /// Hessian statistic over flattened coefficients, row-major over
    /// (component, coordinate): ((d−1)(p+1))².
    pub v: Option<DMatrix<f64>>,
    pub c: f64,
}

impl SuffStats {
    pub fn zeros(
        n_components: usize,
        child_dim: usize,
        ancestor_dim: usize,
        logistic: bool,
    ) -> Self {
        let gating_len = n_components.saturating_sub(1) * (ancestor_dim + 1);
        Self {
            s: (0..n_components).map(|_| ExpertSuffStat::zeros(child_dim, ancestor_dim)).collect(),
            p: vec![0.0; n_components],
            t: logistic
                .then(|| DMatrix::zeros(n_components.saturating_sub(1), ancestor_dim + 1)),
            v: logistic.then(|| DMatrix::zeros(gating_len, gating_len)),
            c: 0.0,
        }
    }

    /// Blockwise self = a·self + b·other over s, p, t, v. Leaves c alone;
    /// the normalizing constant has its own recursion.
    fn scale_add(&mut self, a: f64, other: &Self, b: f64) {
        for (mine, theirs) in self.s.iter_mut().zip(&other.s) {
            mine.scale_add(a, theirs, b);
        }
        for (mine, theirs) in self.p.iter_mut().zip(&other.p) {
            *mine = a * *mine + b * theirs;
        }
        if let (Some(mine), Some(theirs)) = (self.t.as_mut(), other.t.as_ref()) {
            mine.zip_apply(theirs, |m, t| *m = a * *m + b * t);
        }
        if let (Some(mine), Some(theirs)) = (self.v.as_mut(), other.v.as_ref()) {
            mine.zip_apply(theirs, |m, t| *m = a * *m + b * t);
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.p.len() == other.p.len()
            && self.t.is_some() == other.t.is_some()
            && self.v.is_some() == other.v.is_some()
            && self
                .s
                .iter()
                .zip(&other.s)
                .all(|(a, b)| a.cross.shape() == b.cross.shape())
    }
}

/// Schedule and M-step options for one adaptation session.
#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub iterations: usize,
    /// Batch sizes N₀..N_{L−1}.
    pub sample_sizes: Vec<usize>,
    /// Step sizes λ₁..λ_L, each in (0, 1]. The first applied step is forced
    /// to one regardless, to seed the state from the first batch.
    pub step_sizes: Vec<f64>,
    /// Fit one covariance matrix shared by all experts.
    pub pooled: bool,
    /// Relative responsibility-mass floor below which a component is
    /// declared dead and its covariance reset.
    pub min_responsibility_mass: f64,
    /// Divide the pooled covariance by the number of experts instead of the
    /// total responsibility mass.
    pub pool_by_component_count: bool,
    /// When set, estimate the divergence before the first iteration and
    /// after every iteration with this many reference draws.
    pub kld_reference_size: Option<usize>,
}

impl AdaptationConfig {
    /// Constant step size `step_scale`/√L with the first batch doubled.
    pub fn constant_schedule(iterations: usize, batch: usize, step_scale: f64) -> Self {
        let step = if iterations == 0 {
            1.0
        } else {
            (step_scale / (iterations as f64).sqrt()).min(1.0)
        };
        Self {
            iterations,
            sample_sizes: Self::doubled_first(iterations, batch),
            step_sizes: vec![step; iterations],
            pooled: false,
            min_responsibility_mass: 1e-6,
            pool_by_component_count: false,
            kld_reference_size: None,
        }
    }

    /// Decreasing step sizes λ_ℓ = ℓ^(−0.6) with the first batch doubled.
    pub fn decreasing_schedule(iterations: usize, batch: usize) -> Self {
        Self {
            step_sizes: (1..=iterations).map(|l| (l as f64).powf(-0.6)).collect(),
            ..Self::constant_schedule(iterations, batch, 1.0)
        }
    }

    fn doubled_first(iterations: usize, batch: usize) -> Vec<usize> {
        let mut sizes = vec![batch; iterations];
        if let Some(first) = sizes.first_mut() {
            *first = 2 * batch;
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_sizes.len() != self.iterations
            || self.step_sizes.len() != self.iterations
        {
            return Err(Error::InvalidConfig(format!(
                "{} iterations with {} sample sizes and {} step sizes",
                self.iterations,
                self.sample_sizes.len(),
                self.step_sizes.len()
            )));
        }
        if self.sample_sizes.iter().any(|n| *n == 0) {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if self.step_sizes.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::InvalidConfig("step sizes must lie in (0, 1]".into()));
        }
        if !(self.min_responsibility_mass > 0.0 && self.min_responsibility_mass < 1.0) {
            return Err(Error::InvalidConfig(
                "responsibility floor must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One batch of self-normalized importance-sampling statistics: draws n
/// auxiliary pairs from the proposal, weights them against the model kernel,
/// and returns the un-normalized sums p̃_j = Σ w̃ r_j,
/// s̃_j = Σ w̃ r_j S(ξ, x̃, u_j) and, in logistic mode, the gradient rows
/// Σ w̃ (r_j − α_j) x̄ᵀ and Hessian blocks Σ w̃ α_j (α_j' − 1{j=j'}) x̄ x̄ᵀ,
/// together with the weight sum.
pub fn accumulate_is_statistics<R: Rng + ?Sized>(
    theta: &PreparedMixture,
    config: &AuxiliaryProposalConfig,
    model_kernel: &dyn LogKernel,
    n: usize,
    rng: &mut R,
) -> Result<(SuffStats, f64)> {
    let (stats, sum_of_weights, _) =
        accumulate_batch(theta, theta, config, model_kernel, n, rng)?;
    Ok((stats, sum_of_weights))
}

/// [`accumulate_is_statistics`] plus the batch's sum of squared weights,
/// which the adaptation trace turns into an effective sample size. The
/// `proposer` draws the children and supplies the density in the importance
/// weights; `theta` supplies responsibilities and latent scales. The two
/// coincide except when a batch is seeded from an external kernel.
pub(crate) fn accumulate_batch<R: Rng + ?Sized>(
    theta: &PreparedMixture,
    proposer: &dyn ProposalKernel,
    config: &AuxiliaryProposalConfig,
    model_kernel: &dyn LogKernel,
    n: usize,
    rng: &mut R,
) -> Result<(SuffStats, f64, f64)> {
    if config.ancestors().dim() != theta.ancestor_dim() {
        return Err(Error::DimensionMismatch(format!(
            "ancestors of dim {} proposed through a mixture over dim {}",
            config.ancestors().dim(),
            theta.ancestor_dim()
        )));
    }
    let pairs = propose_weighted_pairs(proposer, config, model_kernel, n, rng)?;
    Ok(stats_over_pairs(theta, config, &pairs))
}

/// One auxiliary draw with its importance weight w̃ = l/(ψ·proposal).
pub(crate) struct WeightedPair {
    pub ancestor_index: usize,
    pub child: DVector<f64>,
    pub weight: f64,
}

/// Draws n ancestor indices ∝ ω·ψ, children from `proposer`, and attaches
/// importance weights against the model kernel.
pub(crate) fn propose_weighted_pairs<R: Rng + ?Sized>(
    proposer: &dyn ProposalKernel,
    config: &AuxiliaryProposalConfig,
    model_kernel: &dyn LogKernel,
    n: usize,
    rng: &mut R,
) -> Result<Vec<WeightedPair>> {
    if n == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let base = rng.next_u64();
    parallel::map_indexed(n, |i| {
        let mut stream = substream(base, salt::PROPOSE, i as u64);
        let ancestor_index = config.select(&mut stream);
        let ancestor = &config.ancestors().particles[ancestor_index];
        let child = proposer.draw_child(ancestor, &mut stream);
        let log_kernel = model_kernel.evaluate(ancestor, &child);
        let weight = if log_kernel == f64::NEG_INFINITY {
            0.0
        } else {
            let log_proposal = proposer.log_density(ancestor, &child);
            if log_proposal == f64::NEG_INFINITY {
                return Err(Error::AbsoluteContinuityViolation { log_kernel });
            }
            (log_kernel - config.adjustment(ancestor_index).ln() - log_proposal).exp()
        };
        Ok(WeightedPair { ancestor_index, child, weight })
    })
    .into_iter()
    .collect()
}

/// Accumulates the un-normalized statistic sums over an already weighted
/// batch, with responsibilities and latent scales taken under `theta`.
pub(crate) fn stats_over_pairs(
    theta: &PreparedMixture,
    config: &AuxiliaryProposalConfig,
    pairs: &[WeightedPair],
) -> (SuffStats, f64, f64) {
    let d = theta.n_components();
    let logistic = matches!(theta.gating(), GatingParams::Logistic(_));
    let zeros =
        || SuffStats::zeros(d, theta.child_dim(), theta.ancestor_dim(), logistic);

    struct Batch {
        stats: SuffStats,
        sum: f64,
        sum_sq: f64,
    }
    let folded: Batch = parallel::fold_chunks(
        pairs.len(),
        || Batch { stats: zeros(), sum: 0.0, sum_sq: 0.0 },
        |batch, i| {
            let WeightedPair { ancestor_index, child, weight } = &pairs[i];
            let ancestor = &config.ancestors().particles[*ancestor_index];
            let weight = *weight;
            batch.sum += weight;
            batch.sum_sq += weight * weight;
            if weight == 0.0 {
                return;
            }
            let alpha = theta.gating_weights(ancestor);
            let terms = theta.component_terms(ancestor, child);
            let (resp, _) = theta.responsibilities_from(&alpha, &terms);
            let xbar = extended(ancestor);
            for j in 0..d {
                let mass = weight * resp[j];
                batch.stats.p[j] += mass;
                if mass == 0.0 {
                    continue;
                }
                let scale = mass * theta.expected_latent_scale(j, terms[j].1);
                let block = &mut batch.stats.s[j];
                block.child_outer.ger(scale, child, child, 1.0);
                block.ancestor_outer.ger(scale, &xbar, &xbar, 1.0);
                block.cross.ger(scale, child, &xbar, 1.0);
            }
            if logistic {
                let width = xbar.len();
                let gradient = batch.stats.t.as_mut().expect("logistic statistics allocated");
                for j in 0..d - 1 {
                    gradient
                        .row_mut(j)
                        .iter_mut()
                        .zip(xbar.iter())
                        .for_each(|(g, x)| *g += weight * (resp[j] - alpha[j]) * x);
                }
                let hessian = batch.stats.v.as_mut().expect("logistic statistics allocated");
                for j in 0..d - 1 {
                    for k in 0..d - 1 {
                        let coeff =
                            weight * alpha[j] * (alpha[k] - if j == k { 1.0 } else { 0.0 });
                        if coeff == 0.0 {
                            continue;
                        }
                        hessian
                            .view_mut((j * width, k * width), (width, width))
                            .ger(coeff, &xbar, &xbar, 1.0);
                    }
                }
            }
        },
        |mut left, right| {
            left.stats.scale_add(1.0, &right.stats, 1.0);
            left.sum += right.sum;
            left.sum_sq += right.sum_sq;
            left
        },
    );
    (folded.stats, folded.sum, folded.sum_sq)
}

/// One Robbins-Monro smoothing step. The normalizing constant moves first,
/// c' = (1−λ)c + (λ/n)·Σw̃, and the statistic blocks follow as
/// (1−λ)·state + (λ/(c'n))·increment, so the state tracks expectations under
/// the normalized auxiliary target. A fresh state (c = 0) absorbs its first
/// batch with λ = 1.
pub fn robbins_monro_update(
    state: &SuffStats,
    increment: &SuffStats,
    sum_of_weights: f64,
    n: usize,
    step: f64,
) -> Result<SuffStats> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidConfig(format!("step size {step} outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if !state.same_shape(increment) {
        return Err(Error::DimensionMismatch(
            "statistics increment does not match the state's shape".into(),
        ));
    }
    let lambda = if state.c == 0.0 { 1.0 } else { step };
    let normalizer = (1.0 - lambda) * state.c + lambda * sum_of_weights / n as f64;
    if !(normalizer > 0.0) || !normalizer.is_finite() {
        return Err(Error::DegenerateNormalizer { value: normalizer });
    }
    let mut next = state.clone();
    next.c = normalizer;
    next.scale_add(1.0 - lambda, increment, lambda / (normalizer * n as f64));
    Ok(next)
}

/// Maximizer of the expected complete-data objective at the given
/// statistics: per-expert weighted least squares Λ̄_j = s₃ s₂⁻¹ with residual
/// covariance Σ̄_j = (s₁ − Λ̄ s₃ᵀ)/p_j (optionally pooled across experts),
/// plus the gating update (closed form for constant weights, one safeguarded
/// Newton step for logistic coefficients).
pub fn m_step(
    stats: &SuffStats,
    previous: &MixtureParams,
    config: &AdaptationConfig,
) -> Result<MixtureParams> {
    let d = previous.n_components();
    if stats.p.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "{} responsibility masses for {} experts",
            stats.p.len(),
            d
        )));
    }
    let total_mass: f64 = stats.p.iter().sum();
    if !(total_mass > 0.0) || !total_mass.is_finite() {
        return Err(Error::InvalidConfig("statistics carry no responsibility mass".into()));
    }
    let floor = config.min_responsibility_mass * total_mass;

    let mut regressions: Vec<DMatrix<f64>> = Vec::with_capacity(d);
    let mut residuals: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(d);
    for j in 0..d {
        if stats.p[j] < floor {
            regressions.push(previous.experts[j].regression.clone());
            residuals.push(None);
            continue;
        }
        let block = &stats.s[j];
        let regression = match Cholesky::new(block.ancestor_outer.clone()) {
            Some(chol) => chol.solve(&block.cross.transpose()).transpose(),
            None => {
                warnings::bump(&warnings::SINGULAR_MOMENT_MATRIX);
                let scale = block.ancestor_outer.amax().max(f64::MIN_POSITIVE);
                let pseudo = block
                    .ancestor_outer
                    .clone()
                    .svd(true, true)
                    .pseudo_inverse(1e-12 * scale)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
                &block.cross * pseudo
            }
        };
        let residual =
            linalg::symmetrize(&(&block.child_outer - &regression * block.cross.transpose()));
        regressions.push(regression);
        residuals.push(Some(residual));
    }

    let healthy: Vec<&DMatrix<f64>> = residuals.iter().flatten().collect();
    let covariances: Vec<DMatrix<f64>> = if config.pooled {
        let mut sum = DMatrix::zeros(previous.child_dim(), previous.child_dim());
        for residual in &healthy {
            sum += *residual;
        }
        let divisor =
            if config.pool_by_component_count { d as f64 } else { total_mass };
        vec![sum / divisor; d]
    } else {
        // Dead components keep their regression but restart from the mean
        // covariance of the healthy ones.
        let mut mean = DMatrix::zeros(previous.child_dim(), previous.child_dim());
        for residual in &healthy {
            mean += *residual / (healthy.len() as f64);
        }
        (0..d)
            .map(|j| match &residuals[j] {
                Some(residual) => residual / stats.p[j],
                None => mean.clone(),
            })
            .collect()
    };

    let gating = match &previous.gating {
        GatingParams::Constant(_) => {
            let mut simplex = stats.p.clone();
            normalize_weights(&mut simplex)?;
            GatingParams::Constant(DVector::from_vec(simplex))
        }
        GatingParams::Logistic(beta) => {
            let (Some(gradient), Some(hessian)) = (&stats.t, &stats.v) else {
                return Err(Error::DimensionMismatch(
                    "logistic gating without gradient statistics".into(),
                ));
            };
            GatingParams::Logistic(newton_step(beta, gradient, hessian))
        }
    };

    let experts = regressions
        .into_iter()
        .zip(covariances)
        .map(|(regression, covariance)| {
            crate::strata::ExpertParams::new(regression, covariance)
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureParams::new(gating, experts, previous.family, config.pooled)
}

/// Ascent step β' = β − v⁻¹t on the flattened coefficients. The Hessian
/// statistic is symmetrized and ridged by 1e-8·I; if it still is not
/// negative definite the step falls back to plain gradient ascent. Either
/// step is capped at norm 10.
fn newton_step(beta: &DMatrix<f64>, gradient: &DMatrix<f64>, hessian: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = beta.nrows();
    let width = beta.ncols();
    let len = rows * width;
    let mut flat_gradient = DVector::zeros(len);
    for j in 0..rows {
        for a in 0..width {
            flat_gradient[j * width + a] = gradient[(j, a)];
        }
    }
    let mut negated = -linalg::symmetrize(hessian);
    for k in 0..len {
        negated[(k, k)] += 1e-8;
    }
    let mut step = match Cholesky::new(negated) {
        Some(chol) => chol.solve(&flat_gradient),
        None => {
            warnings::bump(&warnings::GATING_NEWTON_FALLBACK);
            flat_gradient.clone()
        }
    };
    let norm = step.norm();
    if norm > 10.0 {
        step *= 10.0 / norm;
    }
    let mut updated = beta.clone();
    for j in 0..rows {
        for a in 0..width {
            updated[(j, a)] += step[j * width + a];
        }
    }
    updated
}

/// Per-iteration snapshot of one adaptation session.
#[derive(Debug, Clone)]
pub struct AdaptationRecord {
    pub params: MixtureParams,
    pub sum_of_weights: f64,
    /// Effective sample size of the iteration's importance weights.
    pub ess: f64,
    pub kld: Option<KldEstimate>,
}

#[derive(Debug, Clone, Default)]
pub struct AdaptationTrace {
    /// Divergence of the initial parameters, when estimation was requested.
    pub initial_kld: Option<KldEstimate>,
    pub records: Vec<AdaptationRecord>,
}

impl AdaptationTrace {
    /// Divergence estimates in iteration order, starting at iteration zero
    /// (the initial parameters).
    pub fn kld_series(&self) -> Vec<&KldEstimate> {
        self.initial_kld
            .iter()
            .chain(self.records.iter().filter_map(|r| r.kld.as_ref()))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let records: Vec<serde_json::Value> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, record)| {
                serde_json::json!({
                    "iteration": i + 1,
                    "sum_of_weights": record.sum_of_weights,
                    "ess": record.ess,
                    "kld": record.kld.as_ref().map(KldEstimate::to_json),
                    "params": record.params.to_json(),
                })
            })
            .collect();
        serde_json::json!({
            "initial_kld": self.initial_kld.as_ref().map(KldEstimate::to_json),
            "iterations": records,
        })
    }
}

/// Runs a full adaptation session: L rounds of propose, accumulate,
/// Robbins-Monro smoothing and M-step against the fixed weighted ancestors,
/// with uniform adjustment weights. Returns the final parameters and the
/// per-iteration trace. Any mid-session error aborts the session.
pub fn adapt<R: Rng + ?Sized>(
    initial: &MixtureParams,
    ancestors: &WeightedSample,
    model_kernel: &dyn LogKernel,
    config: &AdaptationConfig,
    rng: &mut R,
) -> Result<(MixtureParams, AdaptationTrace)> {
    adapt_impl(initial, ancestors, model_kernel, None, config, rng)
}

/// [`adapt`] with the first batch proposed from `pilot` instead of the
/// initial mixture. An overspread initial mixture wastes its first batch on
/// children far from the target; a model-informed pilot such as the prior
/// kernel concentrates those draws where the kernel has mass, so the first
/// fit starts from a usable importance sample. Later batches come from the
/// running mixture as usual.
pub fn adapt_with_pilot<R: Rng + ?Sized>(
    initial: &MixtureParams,
    ancestors: &WeightedSample,
    model_kernel: &dyn LogKernel,
    pilot: &dyn ProposalKernel,
    config: &AdaptationConfig,
    rng: &mut R,
) -> Result<(MixtureParams, AdaptationTrace)> {
    adapt_impl(initial, ancestors, model_kernel, Some(pilot), config, rng)
}

fn adapt_impl<R: Rng + ?Sized>(
    initial: &MixtureParams,
    ancestors: &WeightedSample,
    model_kernel: &dyn LogKernel,
    pilot: Option<&dyn ProposalKernel>,
    config: &AdaptationConfig,
    rng: &mut R,
) -> Result<(MixtureParams, AdaptationTrace)> {
    config.validate()?;
    let proposal_config = AuxiliaryProposalConfig::uniform(ancestors)?;
    let mut theta = initial.clone();
    let mut trace = AdaptationTrace::default();
    if let Some(reference) = config.kld_reference_size {
        let prepared = PreparedMixture::new(&theta)?;
        trace.initial_kld =
            Some(estimate_kld(&prepared, ancestors, model_kernel, reference, rng)?);
    }
    let logistic = matches!(initial.gating, GatingParams::Logistic(_));
    let mut state = SuffStats::zeros(
        initial.n_components(),
        initial.child_dim(),
        initial.ancestor_dim(),
        logistic,
    );
    for l in 0..config.iterations {
        let prepared = PreparedMixture::new(&theta)?;
        let n = config.sample_sizes[l];
        let proposer: &dyn ProposalKernel = match pilot {
            Some(p) if l == 0 => p,
            _ => &prepared,
        };
        let (increment, sum_of_weights, sum_sq) =
            accumulate_batch(&prepared, proposer, &proposal_config, model_kernel, n, rng)?;
        state = robbins_monro_update(&state, &increment, sum_of_weights, n, config.step_sizes[l])?;
        theta = m_step(&state, &theta, config)?;
        let kld = match config.kld_reference_size {
            Some(reference) => {
                let prepared = PreparedMixture::new(&theta)?;
                Some(estimate_kld(&prepared, ancestors, model_kernel, reference, rng)?)
            }
            None => None,
        };
        trace.records.push(AdaptationRecord {
            params: theta.clone(),
            sum_of_weights,
            ess: if sum_sq > 0.0 { sum_of_weights * sum_of_weights / sum_sq } else { 0.0 },
            kld,
        });
    }
    Ok((theta, trace))
}

/// Weighted-sample EM on one batch of `n` draws from `pilot`: the pairs and
/// their importance weights are computed once, then full-replacement update
/// sweeps rerun the E-step under the current parameters until they stop
/// moving (or `max_sweeps` elapses). The result maximizes the batch estimate
/// of the divergence objective and makes a strong starting point for
/// [`adapt`], whose small smoothing steps refine but barely relocate a poor
/// initial fit.
pub fn fit_pilot_batch<R: Rng + ?Sized>(
    initial: &MixtureParams,
    ancestors: &WeightedSample,
    model_kernel: &dyn LogKernel,
    pilot: &dyn ProposalKernel,
    n: usize,
    max_sweeps: usize,
    config: &AdaptationConfig,
    rng: &mut R,
) -> Result<MixtureParams> {
    let proposal_config = AuxiliaryProposalConfig::uniform(ancestors)?;
    let pairs = propose_weighted_pairs(pilot, &proposal_config, model_kernel, n, rng)?;
    let logistic = matches!(initial.gating, GatingParams::Logistic(_));
    let mut theta = initial.clone();
    for _ in 0..max_sweeps {
        let prepared = PreparedMixture::new(&theta)?;
        let (stats, sum_of_weights, _) = stats_over_pairs(&prepared, &proposal_config, &pairs);
        let fresh = SuffStats::zeros(
            initial.n_components(),
            initial.child_dim(),
            initial.ancestor_dim(),
            logistic,
        );
        let state = robbins_monro_update(&fresh, &stats, sum_of_weights, n, 1.0)?;
        let next = m_step(&state, &theta, config)?;
        let delta = params_delta(&theta, &next);
        theta = next;
        if delta < 1e-9 {
            break;
        }
    }
    Ok(theta)
}

/// Max-norm parameter distance, used as the sweep-convergence criterion.
fn params_delta(a: &MixtureParams, b: &MixtureParams) -> f64 {
    let mut delta = 0.0f64;
    for (ea, eb) in a.experts.iter().zip(&b.experts) {
        delta = delta.max((&ea.regression - &eb.regression).amax());
        delta = delta.max((&ea.covariance - &eb.covariance).amax());
    }
    match (&a.gating, &b.gating) {
        (GatingParams::Constant(wa), GatingParams::Constant(wb)) => {
            delta = delta.max((wa - wb).amax());
        }
        (GatingParams::Logistic(ba), GatingParams::Logistic(bb)) => {
            delta = delta.max((ba - bb).amax());
        }
        _ => return f64::INFINITY,
    }
    delta
}

/// Max-norm distance between `stats` and the exact expected statistics at
/// the parameters maximizing them: ‖(s̄(θ̄(s,p)), p̄(θ̄(s,p))) − (s, p)‖_∞.
/// Zero exactly at stationary points of the adaptation. The caller supplies
/// the exact-expectation oracle for θ ↦ (s̄(θ), p̄(θ)).
pub fn mean_field_residual<F>(
    stats: &SuffStats,
    previous: &MixtureParams,
    config: &AdaptationConfig,
    exact_statistics: F,
) -> Result<f64>
where
    F: FnOnce(&MixtureParams) -> Result<SuffStats>,
{
    let maximizer = m_step(stats, previous, config)?;
    let exact = exact_statistics(&maximizer)?;
    if !stats.same_shape(&exact) {
        return Err(Error::DimensionMismatch(
            "oracle statistics do not match the state's shape".into(),
        ));
    }
    let mut residual = 0.0f64;
    for (mine, theirs) in stats.s.iter().zip(&exact.s) {
        residual = residual.max(mine.max_abs_diff(theirs));
    }
    for (mine, theirs) in stats.p.iter().zip(&exact.p) {
        residual = residual.max((mine - theirs).abs());
    }
    Ok(residual)
}

/// Expected complete-data objective l(s, p; θ) = Σ_j [p_j log β_j
/// − p_j A(η_j) + ⟨B(η_j), s_j⟩] with A(η) = ½ log det Σ and
/// ⟨B(η), S⟩ = −½⟨Σ⁻¹, S₁⟩ − ½⟨ΛᵀΣ⁻¹Λ, S₂⟩ + ⟨Σ⁻¹Λ, S₃⟩, dropping terms
/// free of θ. Defined for constant gating, where the M-step maximizes
/// exactly this map.
pub fn em_objective(stats: &SuffStats, params: &MixtureParams) -> Result<f64> {
    let GatingParams::Constant(simplex) = &params.gating else {
        return Err(Error::InvalidConfig(
            "the split objective applies to constant gating only".into(),
        ));
    };
    if stats.p.len() != params.n_components() {
        return Err(Error::DimensionMismatch(format!(
            "{} responsibility masses for {} experts",
            stats.p.len(),
            params.n_components()
        )));
    }
    let mut total = 0.0;
    for j in 0..params.n_components() {
        let expert = &params.experts[j];
        let chol = linalg::robust_cholesky(&expert.covariance)?;
        let precision = chol.inverse();
        let weighted_regression = &precision * &expert.regression;
        let quad = -0.5 * precision.dot(&stats.s[j].child_outer)
            - 0.5
                * (expert.regression.transpose() * &weighted_regression)
                    .dot(&stats.s[j].ancestor_outer)
            + weighted_regression.dot(&stats.s[j].cross);
        let gating_term = if stats.p[j] > 0.0 { stats.p[j] * simplex[j].ln() } else { 0.0 };
        total += gating_term - 0.5 * stats.p[j] * linalg::log_det(&chol) + quad;
    }
    Ok(total)
}

/// How a fresh mixture routes ancestors to experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingKind {
    Constant,
    Logistic,
}

/// Deterministic starting mixture: uniform gating (zero logistic
/// coefficients), regressions zero except for intercepts spread on a circle
/// around `location`, and overspread diagonal covariances of twice the
/// target spread per coordinate. `spread` is a per-coordinate scale of the
/// child distribution's support.
pub fn overspread_initial_mixture(
    n_components: usize,
    family: StratumFamily,
    gating: GatingKind,
    ancestor_dim: usize,
    location: &DVector<f64>,
    spread: &DVector<f64>,
    pooled: bool,
) -> Result<MixtureParams> {
    if n_components == 0 {
        return Err(Error::InvalidConfig("mixture needs at least one expert".into()));
    }
    if spread.len() != location.len() {
        return Err(Error::DimensionMismatch(format!(
            "location of dim {} with spread of dim {}",
            location.len(),
            spread.len()
        )));
    }
    if spread.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidConfig("spread must be finite and nonnegative".into()));
    }
    let child_dim = location.len();
    // A small floor keeps the strata proper when the spread estimate
    // collapses in some coordinate.
    let padded = spread.map(|s| s + 0.5);
    let covariance = DMatrix::from_diagonal(&padded.map(|s| (2.0 * s) * (2.0 * s)));
    let experts = (0..n_components)
        .map(|j| {
            let mut regression = DMatrix::zeros(child_dim, ancestor_dim + 1);
            let mut intercept = location.clone();
            if n_components > 1 {
                let angle = std::f64::consts::FRAC_PI_4
                    + 2.0 * std::f64::consts::PI * j as f64 / n_components as f64;
                intercept[0] += 0.75 * padded[0] * angle.cos();
                if child_dim > 1 {
                    intercept[1] += 0.75 * padded[1] * angle.sin();
                }
            }
            regression.set_column(ancestor_dim, &intercept);
            crate::strata::ExpertParams::new(regression, covariance.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let gating = match gating {
        GatingKind::Constant => GatingParams::Constant(DVector::from_element(
            n_components,
            1.0 / n_components as f64,
        )),
        GatingKind::Logistic => {
            GatingParams::Logistic(DMatrix::zeros(n_components - 1, ancestor_dim + 1))
        }
    };
    MixtureParams::new(gating, experts, family, pooled)
}

/// [`overspread_initial_mixture`] built from a weighted ancestor cloud, with
/// logistic gating that carves the cloud into directional sectors. Starting
/// from a flat gating, the first responsibilities split on child values
/// alone, which divides the target's residual noise between near-identical
/// experts and routinely stalls the fit in a merged configuration; rows
/// pointing along evenly spaced directions in the plane of the cloud's two
/// dominant principal axes give each expert its own ancestor region from the
/// first E-step on. `sharpness` scales the rows in whitened units (log-odds
/// per principal standard deviation; around 2 works well). Constant gating
/// is returned uniform, identical to the plain initializer.
pub fn sector_initial_mixture(
    n_components: usize,
    family: StratumFamily,
    gating: GatingKind,
    ancestors: &WeightedSample,
    sharpness: f64,
    pooled: bool,
) -> Result<MixtureParams> {
    if !(sharpness.is_finite() && sharpness >= 0.0) {
        return Err(Error::InvalidConfig("sector sharpness must be nonnegative".into()));
    }
    let location = ancestors.weighted_mean();
    let dim = location.len();
    let weights = ancestors.normalized_weights();
    let mut covariance = DMatrix::zeros(dim, dim);
    for (particle, w) in ancestors.particles.iter().zip(&weights) {
        let centered = particle - &location;
        covariance.ger(*w, &centered, &centered, 1.0);
    }
    let spread = covariance.diagonal().map(f64::sqrt);
    let mut theta = overspread_initial_mixture(
        n_components,
        family,
        gating,
        dim,
        &location,
        &spread,
        pooled,
    )?;
    let GatingParams::Logistic(beta) = &mut theta.gating else {
        return Ok(theta);
    };
    if n_components < 2 {
        return Ok(theta);
    }
    // Unit directions u_j in the top principal plane, scaled to whitened
    // units; with one ancestor coordinate the directions alternate signs.
    let eigen = nalgebra::SymmetricEigen::new(covariance);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|a, b| {
        eigen.eigenvalues[*b].partial_cmp(&eigen.eigenvalues[*a]).expect("finite eigenvalues")
    });
    let scaled_axis = |k: usize| {
        let sd = eigen.eigenvalues[order[k]].max(1e-12).sqrt();
        eigen.eigenvectors.column(order[k]) / sd
    };
    let first = scaled_axis(0);
    let second = if dim > 1 { scaled_axis(1) } else { first.clone() };
    for j in 0..n_components - 1 {
        let angle = 2.0 * std::f64::consts::PI * j as f64 / n_components as f64;
        let direction = if dim > 1 {
            &first * angle.cos() + &second * angle.sin()
        } else if j % 2 == 0 {
            first.clone()
        } else {
            -&first
        };
        // Row relative to the last component, which sits at angle 2π(d−1)/d.
        let last_angle = 2.0 * std::f64::consts::PI * (n_components - 1) as f64
            / n_components as f64;
        let last_direction = if dim > 1 {
            &first * last_angle.cos() + &second * last_angle.sin()
        } else if (n_components - 1) % 2 == 0 {
            first.clone()
        } else {
            -&first
        };
        let relative = (direction - last_direction) * sharpness;
        for k in 0..dim {
            beta[(j, k)] = relative[k];
        }
        beta[(j, dim)] = -relative.dot(&location);
    }
    Ok(theta)
}
