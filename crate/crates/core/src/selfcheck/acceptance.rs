//! The ten release gates. Each runner exercises one end-to-end claim about
//! the adaptive filter against an independent oracle or a closed form, at a
//! stated tolerance and runtime budget, and reports pass/fail instead of
//! panicking so the CLI `selftest` subcommand can print the same lines the
//! `acceptance` test target asserts on.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use crate::adaptation::{
    adapt, em_objective, fit_pilot_batch, m_step, overspread_initial_mixture,
    robbins_monro_update, AdaptationConfig, GatingKind, SuffStats,
};
use crate::diagnostics::{
    ess, estimate_kld, negated_entropy, proportion_curve, reference_divergence_from_partition,
};
use crate::error::{Error, Result};
use crate::experts::{GatingParams, MixtureParams, PreparedMixture};
use crate::models::{
    simulate, BesselModel, LinearGaussianMixtureModel, ObservationKernel, PriorProposal,
    StateSpaceModel, TobitModel,
};
use crate::rng::substream;
use crate::sample::{normalize_weights, WeightedSample};
use crate::selfcheck::{oracle, scalar_em, CheckReport};
use crate::smc::{
    apf_step, default_initial_mixture, run_filter, AdaptedProposal, AdjustmentMode, FilterConfig,
    FilterTrace, ProposalMode,
};
use crate::strata::{self, ExpertParams, StratumFamily};

/// Runs every gate in order.
pub fn all() -> Vec<CheckReport> {
    vec![
        a1_quadrature_em_agreement(),
        a2_fixed_point_gradient(),
        a3_single_step_adaptation(),
        a4_step_size_sweep(),
        a5_range_observation_refit(),
        a6_sequential_filtering(),
        a7_censored_family_comparison(),
        a8_update_optimality(),
        a9_heavy_tail_identities(),
        a10_optimal_kernel_uniformity(),
    ]
}

fn timed(
    name: &'static str,
    budget_secs: f64,
    body: impl FnOnce() -> Result<(bool, String)>,
) -> CheckReport {
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed().as_secs_f64();
    match outcome {
        Ok((passed, detail)) => CheckReport {
            name,
            passed: passed && elapsed <= budget_secs,
            detail: format!("{detail}; {elapsed:.1}s of {budget_secs:.0}s"),
        },
        Err(e) => CheckReport {
            name,
            passed: false,
            detail: format!("error: {e}; {elapsed:.1}s of {budget_secs:.0}s"),
        },
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn scalar_testbed_mixture() -> Result<MixtureParams> {
    overspread_initial_mixture(
        2,
        StratumFamily::Gaussian,
        GatingKind::Constant,
        1,
        &DVector::from_element(1, 0.0),
        &DVector::from_element(1, 1.0),
        false,
    )
}

/// One exact-expectation update: quadrature statistics at θ, a unit-step
/// stochastic-approximation accumulation (which with exact statistics is a
/// plain replacement), then the M-step.
fn quadrature_em_step(
    theta: &MixtureParams,
    state: &SuffStats,
    grid: &[(f64, f64, f64)],
    config: &AdaptationConfig,
) -> Result<(MixtureParams, SuffStats)> {
    let stats = scalar_em::exact_suff_stats(theta, grid)?;
    let mass: f64 = stats.p.iter().sum();
    let state = robbins_monro_update(state, &stats, mass, 1, 1.0)?;
    let theta = m_step(&state, theta, config)?;
    Ok((theta, state))
}

/// On the 1-D two-expert testbed with exact tensor-grid expectations and
/// unit steps, the adaptation iterates must match an independently coded
/// batch-EM loop to 1e-10 per parameter for 20 iterations, and the
/// quadrature objective must be non-increasing.
pub fn a1_quadrature_em_agreement() -> CheckReport {
    timed("A1 quadrature EM agreement", 10.0, || {
        let grid = scalar_em::target_grid();
        let config = AdaptationConfig::constant_schedule(1, 10, 1.0);
        let mut theta = scalar_testbed_mixture()?;
        let mut state = SuffStats::zeros(2, 1, 1, false);
        let mut reference = scalar_em::ScalarEmOracle::from_mixture(&theta)?;
        let mut objectives = vec![scalar_em::quadrature_objective(&theta, &grid)?];
        let mut max_dev: f64 = 0.0;
        for _ in 0..20 {
            (theta, state) = quadrature_em_step(&theta, &state, &grid, &config)?;
            reference.em_iteration(&grid);
            let ours = scalar_em::ScalarEmOracle::parameter_vector_of(&theta)?;
            for (a, b) in ours.iter().zip(&reference.parameter_vector()) {
                max_dev = max_dev.max((a - b).abs());
            }
            objectives.push(scalar_em::quadrature_objective(&theta, &grid)?);
        }
        let max_rise = objectives
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let passed = max_dev < 1e-10 && max_rise <= 1e-8;
        Ok((
            passed,
            format!(
                "max parameter deviation {max_dev:.1e} (tol 1e-10), \
                 max objective rise {max_rise:.1e} (tol 1e-8)"
            ),
        ))
    })
}

fn testbed_mixture_from_vector(p: &[f64; 7]) -> Result<MixtureParams> {
    let gating = GatingParams::Constant(DVector::from_vec(vec![p[0], 1.0 - p[0]]));
    let experts = vec![
        ExpertParams::new(
            DMatrix::from_row_slice(1, 2, &[p[1], p[2]]),
            DMatrix::from_element(1, 1, p[3]),
        )?,
        ExpertParams::new(
            DMatrix::from_row_slice(1, 2, &[p[4], p[5]]),
            DMatrix::from_element(1, 1, p[6]),
        )?,
    ];
    MixtureParams::new(gating, experts, StratumFamily::Gaussian, false)
}

/// At the testbed fixed point, central finite differences (h = 1e-5) of the
/// quadrature objective along every unconstrained coordinate (the free gate
/// weight moves inside the simplex) must vanish below 1e-3.
pub fn a2_fixed_point_gradient() -> CheckReport {
    timed("A2 fixed-point gradient", 30.0, || {
        let grid = scalar_em::target_grid();
        let config = AdaptationConfig::constant_schedule(1, 10, 1.0);
        let mut theta = scalar_testbed_mixture()?;
        let mut state = SuffStats::zeros(2, 1, 1, false);
        let mut previous = scalar_em::ScalarEmOracle::parameter_vector_of(&theta)?;
        let mut iterations = 0;
        // The iterates contract by ~1e-3 per pass here, so a handful of
        // iterations reach the quadrature roundoff floor.
        for _ in 0..60 {
            (theta, state) = quadrature_em_step(&theta, &state, &grid, &config)?;
            iterations += 1;
            let current = scalar_em::ScalarEmOracle::parameter_vector_of(&theta)?;
            let delta = current
                .iter()
                .zip(&previous)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            previous = current;
            if delta < 1e-12 {
                break;
            }
        }
        let h = 1e-5;
        let at = scalar_em::ScalarEmOracle::parameter_vector_of(&theta)?;
        let mut max_grad: f64 = 0.0;
        for k in 0..7 {
            let mut plus = at;
            let mut minus = at;
            plus[k] += h;
            minus[k] -= h;
            let v_plus = scalar_em::quadrature_objective(&testbed_mixture_from_vector(&plus)?, &grid)?;
            let v_minus =
                scalar_em::quadrature_objective(&testbed_mixture_from_vector(&minus)?, &grid)?;
            max_grad = max_grad.max(((v_plus - v_minus) / (2.0 * h)).abs());
        }
        let passed = max_grad < 1e-3;
        Ok((
            passed,
            format!(
                "max |gradient| {max_grad:.1e} (tol 1e-3) after {iterations} iterations to the \
                 fixed point"
            ),
        ))
    })
}

fn lg_ancestors(model: &LinearGaussianMixtureModel, n: usize, seed: u64) -> Result<WeightedSample> {
    let mut rng = substream(seed, 0, 0);
    WeightedSample::uniform((0..n).map(|_| model.initial_sampler(&mut rng)).collect())
}

/// One observation step of the bimodal linear-Gaussian model: the prior
/// kernel concentrates weight mass on few particles, ten adaptation
/// iterations spread it back out, and after twenty the estimated divergence
/// agrees with the closed-form optimal-kernel level.
pub fn a3_single_step_adaptation() -> CheckReport {
    timed("A3 single-step adaptation", 120.0, || {
        const SEED: u64 = 0xA3;
        let model = LinearGaussianMixtureModel::new();
        let n = 20_000;
        let ancestors = lg_ancestors(&model, n, SEED)?;
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let mut rng = substream(SEED, 1, 0);

        let prior_step = apf_step(&ancestors, &model, &y, &FilterConfig::bootstrap(n, SEED), &mut rng)?;
        let prior_curve = proportion_curve(&prior_step.weights)?;
        let prior_share7 = prior_curve.particle_share_for_mass(0.7);
        let prior_share8 = prior_curve.particle_share_for_mass(0.8);

        let mut config = AdaptationConfig::constant_schedule(20, 4_000, 0.1);
        config.kld_reference_size = Some(20_000);
        let spec = AdaptedProposal {
            adaptation: config.clone(),
            n_components: 2,
            family: StratumFamily::Gaussian,
            gating: GatingKind::Logistic,
            pooled: false,
            warm_start: false,
        };
        let initial = default_initial_mixture(&ancestors, &spec)?;
        let kernel = ObservationKernel::new(&model, y.clone())?;
        let pilot = PriorProposal { model: &model };
        let seeded =
            fit_pilot_batch(&initial, &ancestors, &kernel, &pilot, 3 * n, 100, &config, &mut rng)?;
        let (_, trace) = adapt(&seeded, &ancestors, &kernel, &config, &mut rng)?;

        let theta10 = trace.records[9].params.clone();
        let mid = apf_step(
            &ancestors,
            &model,
            &y,
            &FilterConfig::new(n, ProposalMode::Fixed(theta10), AdjustmentMode::Uniform, SEED),
            &mut rng,
        )?;
        let adapted_share8 = proportion_curve(&mid.weights)?.particle_share_for_mass(0.8);

        let final_kld = trace.records[19]
            .kld
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("missing divergence estimate".into()))?;
        let partition: Vec<f64> = ancestors
            .particles
            .iter()
            .map(|xi| model.optimal_adjustment(xi, &y).expect("closed form available"))
            .collect();
        let reference =
            reference_divergence_from_partition(&ancestors.normalized_weights(), &partition)?;
        let gap = (final_kld.divergence - reference).abs();
        let bound = 3.0 * final_kld.divergence_standard_error;

        let passed = prior_share7 <= 0.30
            && adapted_share8 >= 1.3 * prior_share8
            && gap <= bound;
        Ok((
            passed,
            format!(
                "prior kernel puts 70% of mass on {:.1}% of particles (need ≤ 30%); 80% of mass \
                 spreads from {:.1}% to {:.1}% of particles after 10 iterations (need ≥ 1.3×); \
                 final divergence {:.4} vs optimal-kernel level {:.4}, gap {:.4} ≤ {:.4}",
                100.0 * prior_share7,
                100.0 * prior_share8,
                100.0 * adapted_share8,
                final_kld.divergence,
                reference,
                gap,
                bound
            ),
        ))
    })
}

/// Step-size sweep on the same single-step problem and seed: scales 0.1 and
/// 1 must end at a lower estimated divergence than scale 0.001.
pub fn a4_step_size_sweep() -> CheckReport {
    timed("A4 step-size sweep", 300.0, || {
        const SEED: u64 = 0xA4;
        let model = LinearGaussianMixtureModel::new();
        let ancestors = lg_ancestors(&model, 20_000, SEED)?;
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let kernel = ObservationKernel::new(&model, y.clone())?;
        let scales = [0.001, 0.01, 0.1, 1.0];
        let mut finals = Vec::new();
        for scale in scales {
            let config = AdaptationConfig::constant_schedule(20, 1_000, scale);
            let spec = AdaptedProposal {
                adaptation: config.clone(),
                n_components: 2,
                family: StratumFamily::Gaussian,
                gating: GatingKind::Logistic,
                pooled: false,
                warm_start: false,
            };
            let initial = default_initial_mixture(&ancestors, &spec)?;
            let mut rng = substream(SEED, 1, 0);
            let (fitted, _) = adapt(&initial, &ancestors, &kernel, &config, &mut rng)?;
            let mut kld_rng = substream(SEED, 2, 0);
            let estimate = estimate_kld(
                &PreparedMixture::new(&fitted)?,
                &ancestors,
                &kernel,
                50_000,
                &mut kld_rng,
            )?;
            finals.push(estimate.divergence);
        }
        let passed = finals[2] < finals[0] && finals[3] < finals[0];
        Ok((
            passed,
            format!(
                "final divergence by step scale: 0.001 → {:.4}, 0.01 → {:.4}, 0.1 → {:.4}, \
                 1 → {:.4} (need the last two below the first)",
                finals[0], finals[1], finals[2], finals[3]
            ),
        ))
    })
}

/// Range-only observation: the prior kernel wastes almost all weights, and
/// a six-expert refit recovers them within two iterations.
pub fn a5_range_observation_refit() -> CheckReport {
    timed("A5 range-observation refit", 180.0, || {
        const SEED: u64 = 0xA5;
        let model = BesselModel::new();
        let y = DVector::from_element(1, 1.0);
        let mut rng = substream(SEED, 0, 0);

        let small =
            WeightedSample::uniform((0..1_000).map(|_| model.initial_sampler(&mut rng)).collect())?;
        let small_step =
            apf_step(&small, &model, &y, &FilterConfig::bootstrap(1_000, SEED), &mut rng)?;
        let tiny_fraction = small_step
            .normalized_weights()
            .iter()
            .filter(|w| **w < 1e-6)
            .count() as f64
            / 1_000.0;

        let n = 2_000;
        let ancestors =
            WeightedSample::uniform((0..n).map(|_| model.initial_sampler(&mut rng)).collect())?;
        let prior_step =
            apf_step(&ancestors, &model, &y, &FilterConfig::bootstrap(n, SEED), &mut rng)?;
        let prior_share9 = proportion_curve(&prior_step.weights)?.particle_share_for_mass(0.9);

        let mut config = AdaptationConfig::constant_schedule(30, 200, 1.0);
        config.sample_sizes = vec![200; 30];
        config.sample_sizes[0] = 1_000;
        config.step_sizes = vec![0.5; 30];
        config.kld_reference_size = Some(5_000);
        let spec = AdaptedProposal {
            adaptation: config.clone(),
            n_components: 6,
            family: StratumFamily::Gaussian,
            gating: GatingKind::Logistic,
            pooled: false,
            warm_start: false,
        };
        let initial = default_initial_mixture(&ancestors, &spec)?;
        let kernel = ObservationKernel::new(&model, y.clone())?;
        let (fitted, trace) = adapt(&initial, &ancestors, &kernel, &config, &mut rng)?;
        let series = trace.kld_series();
        let drop_ok = series[2].divergence < 0.25 * series[0].divergence;

        let adapted_step = apf_step(
            &ancestors,
            &model,
            &y,
            &FilterConfig::new(n, ProposalMode::Fixed(fitted), AdjustmentMode::Uniform, SEED),
            &mut rng,
        )?;
        let adapted_share9 = proportion_curve(&adapted_step.weights)?.particle_share_for_mass(0.9);

        let passed = (0.70..=0.90).contains(&tiny_fraction)
            && drop_ok
            && prior_share9 <= 0.25
            && adapted_share9 >= 0.55;
        Ok((
            passed,
            format!(
                "{:.1}% of prior-kernel weights below 1e-6 (need 80% ± 10%); divergence \
                 {:.2} → {:.2} by iteration 2 (need < 25%); 90% of mass on {:.1}% → {:.1}% of \
                 particles (need ≤ 25% rising to ≥ 55%)",
                100.0 * tiny_fraction,
                series[0].divergence,
                series[2].divergence,
                100.0 * prior_share9,
                100.0 * adapted_share9
            ),
        ))
    })
}

/// Fifty filtering steps of the range-only model, five replicate seeds:
/// the adapted filter must beat the bootstrap filter on mean relative
/// effective sample size and on mean negated entropy, each by two standard
/// errors of the paired differences.
pub fn a6_sequential_filtering() -> CheckReport {
    timed("A6 sequential filtering", 600.0, || {
        const SEED: u64 = 0xA6;
        let model = BesselModel::new();
        let (_, observations) = simulate(&model, 50, &mut substream(SEED, 0, 0));

        let mean_rel_ess = |trace: &FilterTrace, propagated: f64| {
            trace.records.iter().map(|r| r.ess / propagated).sum::<f64>()
                / trace.records.len() as f64
        };
        let mean_entropy = |trace: &FilterTrace| {
            trace.records.iter().map(|r| r.negated_entropy).sum::<f64>()
                / trace.records.len() as f64
        };

        let mut ess_gains = Vec::new();
        let mut entropy_gains = Vec::new();
        for replicate in 0..5u64 {
            let seed = SEED + 1 + replicate;
            let bootstrap_config = FilterConfig::bootstrap(2_000, seed);
            let bootstrap =
                run_filter(&model, &observations, &bootstrap_config, &mut bootstrap_config.rng())?;
            let mut adapted_config = FilterConfig::new(
                2_000,
                ProposalMode::Adapted(AdaptedProposal {
                    adaptation: AdaptationConfig::constant_schedule(5, 200, 1.0),
                    n_components: 6,
                    family: StratumFamily::Gaussian,
                    gating: GatingKind::Logistic,
                    pooled: false,
                    warm_start: true,
                }),
                AdjustmentMode::Uniform,
                seed,
            );
            adapted_config.adaptation_budget = Some(0.5);
            let adapted =
                run_filter(&model, &observations, &adapted_config, &mut adapted_config.rng())?;
            if bootstrap.collapsed_at.is_some() || adapted.collapsed_at.is_some() {
                return Ok((false, format!("a replicate collapsed (seed {seed})")));
            }
            // The adapted run propagates (1 − budget)·N particles per step.
            ess_gains.push(mean_rel_ess(&adapted, 1_000.0) - mean_rel_ess(&bootstrap, 2_000.0));
            entropy_gains.push(mean_entropy(&bootstrap) - mean_entropy(&adapted));
        }
        let (ess_mean, ess_se) = mean_and_se(&ess_gains);
        let (ent_mean, ent_se) = mean_and_se(&entropy_gains);
        let passed = ess_mean >= 2.0 * ess_se && ent_mean >= 2.0 * ent_se;
        Ok((
            passed,
            format!(
                "relative ESS gain {ess_mean:.3} ± {ess_se:.3}, negated-entropy gain \
                 {ent_mean:.3} ± {ent_se:.3} over 5 seeds (need each mean ≥ 2 standard errors)"
            ),
        ))
    })
}

/// Censored observation: both stratum families must close at least half of
/// the prior-to-optimal divergence gap within ten iterations, the Gaussian
/// family must settle below the heavy-tailed one, and the closed-form
/// optimal-kernel level must sit well below the prior level.
pub fn a7_censored_family_comparison() -> CheckReport {
    timed("A7 censored-family comparison", 600.0, || {
        const SEED: u64 = 0xA7;
        let model = TobitModel::new();
        let y = DVector::from_element(1, 0.0);
        let mut rng = substream(SEED, 0, 0);
        let ancestors =
            WeightedSample::uniform((0..1_000).map(|_| model.initial_sampler(&mut rng)).collect())?;
        let kernel = ObservationKernel::new(&model, y.clone())?;

        // With a censored observation the adjustment integral has a closed
        // form: the child index Bᵀx' is Gaussian around 0.8(x₁ + x₂) with
        // variance 4, and averaging the censoring probability over it gives
        // Φ(−0.8(x₁ + x₂) / √4.1).
        let closed_form = |xi: &DVector<f64>| {
            oracle::normal_cdf(-0.8 * (xi[0] + xi[1]) / 4.1f64.sqrt())
        };
        let mut closed_form_err: f64 = 0.0;
        for xi in ancestors.particles.iter().take(3) {
            let m = 0.8 * (xi[0] + xi[1]);
            let quadrature = oracle::integrate_1d(
                |s| {
                    (-0.5 * (s - m) * (s - m) / 4.0).exp()
                        / (8.0 * std::f64::consts::PI).sqrt()
                        * oracle::normal_cdf(-s / 0.1f64.sqrt())
                },
                m,
                30.0,
            );
            closed_form_err = closed_form_err.max((quadrature - closed_form(xi)).abs());
        }

        let partition: Vec<f64> = ancestors.particles.iter().map(closed_form).collect();
        let floor =
            reference_divergence_from_partition(&ancestors.normalized_weights(), &partition)?;
        let prior = estimate_kld(
            &PriorProposal { model: &model },
            &ancestors,
            &kernel,
            20_000,
            &mut rng,
        )?
        .divergence;

        let mut early = Vec::new();
        let mut tails = Vec::new();
        for family in [StratumFamily::Gaussian, StratumFamily::StudentT { dof: 3.0 }] {
            let mut config = AdaptationConfig::constant_schedule(500, 200, 0.1);
            config.kld_reference_size = Some(2_000);
            let spec = AdaptedProposal {
                adaptation: config.clone(),
                n_components: 2,
                family,
                gating: GatingKind::Logistic,
                pooled: false,
                warm_start: false,
            };
            let initial = default_initial_mixture(&ancestors, &spec)?;
            let mut fit_rng = substream(SEED, 1, 0);
            let (_, trace) = adapt(&initial, &ancestors, &kernel, &config, &mut fit_rng)?;
            let series = trace.kld_series();
            early.push(series[10].divergence);
            let tail: Vec<f64> = series[401..].iter().map(|k| k.divergence).collect();
            tails.push(tail.iter().sum::<f64>() / tail.len() as f64);
        }

        let halfway = prior - 0.5 * (prior - floor);
        let passed = closed_form_err <= 1e-8
            && early.iter().all(|&e| e <= halfway)
            && tails[0] < tails[1]
            && floor >= 0.3 * prior
            && floor <= 0.7 * prior;
        Ok((
            passed,
            format!(
                "closed-form adjustment vs quadrature {closed_form_err:.1e} (tol 1e-8); \
                 divergence after 10 iterations {:.3}/{:.3} (need ≤ {halfway:.3}); tail averages \
                 {:.4} Gaussian vs {:.4} heavy-tailed (need Gaussian lower); optimal level \
                 {floor:.3} within [0.3, 0.7]×prior {prior:.3}",
                early[0], early[1], tails[0], tails[1]
            ),
        ))
    })
}

fn perturbed_mixture(params: &MixtureParams, rng: &mut impl rand::Rng) -> Result<MixtureParams> {
    let scale = 1e-4 + 0.05 * rng.random::<f64>();
    let sn = |rng: &mut dyn rand::Rng| -> f64 { StandardNormal.sample(rng) };
    let experts = params
        .experts
        .iter()
        .map(|e| {
            let regression = e.regression.map(|x| x + scale * sn(rng));
            let p = e.child_dim();
            // Conjugating by I + εE keeps the covariance positive definite
            // while moving it in both directions.
            let factor = DMatrix::from_fn(p, p, |i, j| {
                scale * sn(rng) + if i == j { 1.0 } else { 0.0 }
            });
            let covariance = &factor * &e.covariance * factor.transpose();
            ExpertParams::new(regression, crate::linalg::symmetrize(&covariance))
        })
        .collect::<Result<Vec<_>>>()?;
    let GatingParams::Constant(simplex) = &params.gating else {
        return Err(Error::InvalidConfig("constant gating expected".into()));
    };
    let mut weights: Vec<f64> = simplex.iter().map(|w| w * (scale * sn(rng)).exp()).collect();
    normalize_weights(&mut weights)?;
    MixtureParams::new(
        GatingParams::Constant(DVector::from_vec(weights)),
        experts,
        params.family,
        false,
    )
}

/// Over random sufficient statistics, the refit parameters must score at
/// least as well as random perturbations of themselves on the split
/// objective the update maximizes.
pub fn a8_update_optimality() -> CheckReport {
    timed("A8 update optimality", 60.0, || {
        const SEED: u64 = 0xA8;
        let mut rng = substream(SEED, 0, 0);
        let config = AdaptationConfig::constant_schedule(1, 10, 1.0);
        let mut worst_margin = f64::INFINITY;
        for case in 0..100 {
            let child_dim = 1 + case % 2;
            let ancestor_dim = 1 + (case / 2) % 2;
            let mut stats = SuffStats::zeros(2, child_dim, ancestor_dim, false);
            for _ in 0..30 {
                let ancestor = DVector::from_fn(ancestor_dim, |_, _| StandardNormal.sample(&mut rng));
                let child = DVector::from_fn(child_dim, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    2.0 * z
                });
                let weight = 0.05 + rng.random::<f64>();
                let split = rng.random::<f64>();
                let point = strata::sufficient_stat(&ancestor, &child, 1.0);
                for (j, share) in [split, 1.0 - split].into_iter().enumerate() {
                    stats.p[j] += weight * share;
                    stats.s[j].scale_add(1.0, &point, weight * share);
                }
            }
            stats.c = 1.0;
            let previous = overspread_initial_mixture(
                2,
                StratumFamily::Gaussian,
                GatingKind::Constant,
                ancestor_dim,
                &DVector::zeros(child_dim),
                &DVector::from_element(child_dim, 1.0),
                false,
            )?;
            let fitted = m_step(&stats, &previous, &config)?;
            let best = em_objective(&stats, &fitted)?;
            for _ in 0..100 {
                let other = em_objective(&stats, &perturbed_mixture(&fitted, &mut rng)?)?;
                worst_margin = worst_margin.min(best - other);
            }
        }
        let passed = worst_margin >= -1e-9;
        Ok((
            passed,
            format!(
                "worst objective margin over 100 statistics × 100 perturbations: \
                 {worst_margin:.2e} (needs ≥ −1e-9)"
            ),
        ))
    })
}

/// Heavy-tailed stratum identities: the closed-form log density and the
/// conditional latent-scale mean must match their scale-mixture quadratures,
/// and the sampler's covariance must match ν/(ν−2)·Σ.
pub fn a9_heavy_tail_identities() -> CheckReport {
    timed("A9 heavy-tail identities", 60.0, || {
        const SEED: u64 = 0xA9;
        let mut rng = substream(SEED, 0, 0);
        let mut density_err: f64 = 0.0;
        let mut scale_err: f64 = 0.0;
        for _ in 0..100 {
            let dof = 3.0 + 5.0 * rng.random::<f64>();
            let regression =
                DMatrix::from_fn(2, 3, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
            let shape = DMatrix::from_fn(2, 2, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
            let covariance = &shape * shape.transpose() + DMatrix::identity(2, 2) * 0.3;
            let params = ExpertParams::new(regression, covariance.clone())?;
            let family = StratumFamily::StudentT { dof };
            let ancestor = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let mean = params.mean(&ancestor);
            let child = DVector::from_fn(2, |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean[i] + 2.0 * z
            });
            let sigma = [
                covariance[(0, 0)],
                covariance[(0, 1)],
                covariance[(1, 0)],
                covariance[(1, 1)],
            ];
            let mean_s = [mean[0], mean[1]];
            let child_s = [child[0], child[1]];
            let lib_density = strata::log_density(&params, family, &ancestor, &child)?;
            let ref_density =
                oracle::student_log_density_by_quadrature(&sigma, 2, &mean_s, &child_s, dof);
            density_err = density_err.max((lib_density - ref_density).abs());
            let lib_scale = strata::expected_latent_scale(&params, family, &ancestor, &child)?;
            let ref_scale =
                oracle::conditional_scale_by_quadrature(&sigma, 2, &mean_s, &child_s, dof);
            scale_err = scale_err.max((lib_scale - ref_scale).abs());
        }

        let dof = 5.0;
        let covariance = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let params = ExpertParams::new(DMatrix::zeros(2, 2), covariance.clone())?;
        let origin = DVector::zeros(1);
        let draws = 1_000_000;
        let mut sum = DVector::zeros(2);
        let mut outer = DMatrix::zeros(2, 2);
        for _ in 0..draws {
            let x = strata::draw(&params, StratumFamily::StudentT { dof }, &origin, &mut rng)?;
            sum += &x;
            outer.ger(1.0, &x, &x, 1.0);
        }
        let mean = sum / draws as f64;
        let mut empirical = outer / draws as f64;
        empirical.ger(-1.0, &mean, &mean, 1.0);
        let expected = covariance * (dof / (dof - 2.0));
        let mut cov_rel_err: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                cov_rel_err =
                    cov_rel_err.max((empirical[(i, j)] - expected[(i, j)]).abs() / expected[(i, j)]);
            }
        }

        let passed = density_err <= 1e-8 && scale_err <= 1e-8 && cov_rel_err <= 0.05;
        Ok((
            passed,
            format!(
                "log-density vs quadrature {density_err:.1e}, latent-scale mean vs quadrature \
                 {scale_err:.1e} (tol 1e-8); sampler covariance off by {:.2}% (tol 5%) at 1e6 \
                 draws",
                100.0 * cov_rel_err
            ),
        ))
    })
}

/// Closed-form optimal kernel with its matching adjustment: every importance
/// weight is the same constant, so the effective sample size is N and the
/// negated entropy is −log N.
pub fn a10_optimal_kernel_uniformity() -> CheckReport {
    timed("A10 optimal-kernel uniformity", 10.0, || {
        const SEED: u64 = 0xAA;
        let model = LinearGaussianMixtureModel::new();
        let n = 20_000;
        let ancestors = lg_ancestors(&model, n, SEED)?;
        let y = DVector::from_vec(vec![0.4, -0.2]);
        let mut rng = substream(SEED, 1, 0);
        let config = FilterConfig::new(n, ProposalMode::Optimal, AdjustmentMode::Optimal, SEED);
        let out = apf_step(&ancestors, &model, &y, &config, &mut rng)?;
        let normalized = out.normalized_weights();
        let uniform = 1.0 / n as f64;
        let max_rel_dev = normalized
            .iter()
            .map(|w| (w - uniform).abs() / uniform)
            .fold(0.0, f64::max);
        let ess_value = ess(&out.weights)?;
        let entropy_value = negated_entropy(&out.weights)?;
        let ess_gap = (ess_value - n as f64).abs() / n as f64;
        let entropy_gap = (entropy_value + (n as f64).ln()).abs();
        let passed = max_rel_dev <= 1e-8 && ess_gap <= 1e-12 && entropy_gap <= 1e-9;
        Ok((
            passed,
            format!(
                "max relative weight deviation {max_rel_dev:.1e} (tol 1e-8), ESS within \
                 {ess_gap:.1e} of N, negated entropy within {entropy_gap:.1e} of −log N"
            ),
        ))
    })
}
