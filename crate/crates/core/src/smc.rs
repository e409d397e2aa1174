//! The auxiliary particle filter: single-step updates under configurable
//! proposal and adjustment choices, and multi-step runs that refit the
//! proposal online.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::adaptation::{
    adapt, sector_initial_mixture, AdaptationConfig, AdaptationTrace, GatingKind,
};
use crate::diagnostics::{ess, negated_entropy};
use crate::error::{Error, Result};
use crate::experts::{
    AuxiliaryProposalConfig, LogKernel, MixtureParams, PreparedMixture, ProposalKernel,
};
use crate::models::{ObservationKernel, OptimalProposal, PriorProposal, StateSpaceModel};
use crate::parallel;
use crate::rng::{salt, substream};
use crate::sample::WeightedSample;
use crate::strata::StratumFamily;

/// How children are proposed at each step.
#[derive(Debug, Clone)]
pub enum ProposalMode {
    /// Propose from the prior kernel; combined with [`AdjustmentMode::Uniform`]
    /// this is the bootstrap filter.
    Prior,
    /// Propose from the model's closed-form optimal kernel.
    Optimal,
    /// Propose from a fixed mixture of experts.
    Fixed(MixtureParams),
    /// Refit a mixture of experts to the step's auxiliary target, then
    /// propose from the fit.
    Adapted(AdaptedProposal),
}

/// Shape and schedule of the online proposal fit.
#[derive(Debug, Clone)]
pub struct AdaptedProposal {
    pub adaptation: AdaptationConfig,
    pub n_components: usize,
    pub family: StratumFamily,
    pub gating: GatingKind,
    pub pooled: bool,
    /// Seed each step's fit with the previous step's parameters instead of a
    /// fresh overspread mixture.
    pub warm_start: bool,
}

/// Adjustment weights ψ for the ancestor selection law ∝ ω ψ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjustmentMode {
    Uniform,
    /// The model's closed-form optimal adjustment L*.
    Optimal,
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub proposal: ProposalMode,
    pub adjustment: AdjustmentMode,
    pub seed: u64,
    /// Fraction α of the particle budget spent on adaptation. When set, each
    /// of the L fit iterations draws ⌈αN/L⌉ children and the propagation
    /// keeps ⌈(1−α)N⌉ particles.
    pub adaptation_budget: Option<f64>,
    /// Refit every `stride`-th step, reusing the latest fit in between.
    pub adaptation_stride: usize,
}

impl FilterConfig {
    pub fn new(
        n_particles: usize,
        proposal: ProposalMode,
        adjustment: AdjustmentMode,
        seed: u64,
    ) -> Self {
        Self {
            n_particles,
            proposal,
            adjustment,
            seed,
            adaptation_budget: None,
            adaptation_stride: 1,
        }
    }

    /// Prior proposal with uniform adjustment.
    pub fn bootstrap(n_particles: usize, seed: u64) -> Self {
        Self::new(n_particles, ProposalMode::Prior, AdjustmentMode::Uniform, seed)
    }

    /// The generator a run keyed by this config starts from.
    pub fn rng(&self) -> ChaCha12Rng {
        substream(self.seed, salt::FILTER_INIT, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::InvalidConfig("a filter needs at least two particles".into()));
        }
        if let Some(alpha) = self.adaptation_budget {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "adaptation budget must lie in (0, 1), got {alpha}"
                )));
            }
        }
        if self.adaptation_stride == 0 {
            return Err(Error::InvalidConfig("adaptation stride must be positive".into()));
        }
        if let ProposalMode::Adapted(spec) = &self.proposal {
            spec.adaptation.validate()?;
            if spec.n_components == 0 {
                return Err(Error::InvalidConfig("adapted proposal needs experts".into()));
            }
        }
        Ok(())
    }
}

/// Fresh overspread mixture centered on the ancestor cloud, the default
/// starting point of a step's fit. Logistic gating starts with
/// ancestor-space sectors so the experts separate structurally rather than
/// on residual noise.
pub fn default_initial_mixture(
    sample: &WeightedSample,
    spec: &AdaptedProposal,
) -> Result<MixtureParams> {
    sector_initial_mixture(
        spec.n_components,
        spec.family,
        spec.gating,
        sample,
        SECTOR_SHARPNESS,
        spec.pooled,
    )
}

/// Initial log-odds per whitened principal standard deviation; enough for
/// the first responsibilities to commit to sectors without saturating them.
const SECTOR_SHARPNESS: f64 = 2.0;

struct StepOutcome {
    sample: WeightedSample,
    fitted: Option<MixtureParams>,
    adaptation: Option<AdaptationTrace>,
}

fn step_inner<R: Rng + ?Sized>(
    sample: &WeightedSample,
    model: &dyn StateSpaceModel,
    observation: &DVector<f64>,
    config: &FilterConfig,
    warm: Option<&MixtureParams>,
    adapt_now: bool,
    rng: &mut R,
) -> Result<StepOutcome> {
    config.validate()?;
    if sample.dim() != model.dim_state() {
        return Err(Error::DimensionMismatch(format!(
            "particles of dim {} for a model with state dim {}",
            sample.dim(),
            model.dim_state()
        )));
    }
    let kernel = ObservationKernel::new(model, observation.clone())?;
    let selection = match config.adjustment {
        AdjustmentMode::Uniform => AuxiliaryProposalConfig::uniform(sample)?,
        AdjustmentMode::Optimal => {
            if !model.has_closed_form_optimal() {
                return Err(Error::InvalidConfig(
                    "this model has no closed-form optimal adjustment".into(),
                ));
            }
            AuxiliaryProposalConfig::new(sample, |x| {
                model.optimal_adjustment(x, observation).expect("closed form checked above")
            })?
        }
    };

    let mut n_propagate = config.n_particles;
    let mut fitted = None;
    let mut adaptation_trace = None;
    let proposal: Box<dyn ProposalKernel> = match &config.proposal {
        ProposalMode::Prior => Box::new(PriorProposal { model }),
        ProposalMode::Optimal => Box::new(OptimalProposal::new(model, observation.clone())?),
        ProposalMode::Fixed(params) => Box::new(PreparedMixture::new(params)?),
        ProposalMode::Adapted(spec) => {
            let mut schedule = spec.adaptation.clone();
            if let Some(alpha) = config.adaptation_budget {
                let iterations = schedule.iterations.max(1);
                let per_iteration = (alpha * config.n_particles as f64 / iterations as f64)
                    .ceil() as usize;
                schedule.sample_sizes = vec![per_iteration.max(2); schedule.iterations];
                n_propagate =
                    (((1.0 - alpha) * config.n_particles as f64).ceil() as usize).max(2);
            }
            let initial = match warm {
                Some(params) if spec.warm_start => params.clone(),
                _ => default_initial_mixture(sample, spec)?,
            };
            let params = if adapt_now {
                let (theta, trace) = adapt(&initial, sample, &kernel, &schedule, rng)?;
                adaptation_trace = Some(trace);
                theta
            } else {
                initial
            };
            let prepared = PreparedMixture::new(&params)?;
            fitted = Some(params);
            Box::new(prepared)
        }
    };

    let base = rng.next_u64();
    let draws = parallel::map_indexed(n_propagate, |i| {
        let mut sub = substream(base, salt::FILTER_STEP, i as u64);
        let index = selection.select(&mut sub);
        let ancestor = &sample.particles[index];
        let child = proposal.draw_child(ancestor, &mut sub);
        let log_weight = kernel.evaluate(ancestor, &child)
            - selection.adjustment(index).ln()
            - proposal.log_density(ancestor, &child);
        (index, child, log_weight.exp())
    });

    let mut particles = Vec::with_capacity(n_propagate);
    let mut weights = Vec::with_capacity(n_propagate);
    let mut ancestors = Vec::with_capacity(n_propagate);
    for (index, child, weight) in draws {
        ancestors.push(index);
        particles.push(child);
        weights.push(weight);
    }
    let mut new_sample = WeightedSample::new(particles, weights)?;
    new_sample.ancestors = Some(ancestors);
    Ok(StepOutcome { sample: new_sample, fitted, adaptation: adaptation_trace })
}

/// One filter update: select ancestors ∝ ω ψ, propose children, and weight
/// them by l / (ψ · proposal density). In adapted mode the proposal is first
/// refit against the step's auxiliary target.
pub fn apf_step<R: Rng + ?Sized>(
    sample: &WeightedSample,
    model: &dyn StateSpaceModel,
    observation: &DVector<f64>,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<WeightedSample> {
    Ok(step_inner(sample, model, observation, config, None, true, rng)?.sample)
}

/// Per-step summary of a filter run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub ess: f64,
    pub negated_entropy: f64,
    pub cpu_ms: f64,
    /// Weighted-mean state estimate.
    pub estimate: DVector<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FilterTrace {
    pub records: Vec<StepRecord>,
    /// Step at which every weight vanished, ending the run early.
    pub collapsed_at: Option<usize>,
    /// Divergence series of each step's proposal fit, when adapted proposals
    /// estimated them.
    pub adaptations: Vec<AdaptationTrace>,
}

impl FilterTrace {
    pub fn to_csv(&self) -> String {
        let dim = self.records.first().map_or(0, |r| r.estimate.len());
        let mut out = String::from("step,ess,negated_entropy,cpu_ms");
        for k in 0..dim {
            out.push_str(&format!(",estimate_{k}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}", r.step, r.ess, r.negated_entropy, r.cpu_ms));
            for v in r.estimate.iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "collapsed_at": self.collapsed_at,
            "records": self
                .records
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "step": r.step,
                        "ess": r.ess,
                        "negated_entropy": r.negated_entropy,
                        "cpu_ms": r.cpu_ms,
                        "estimate": r.estimate.iter().copied().collect::<Vec<f64>>(),
                    })
                })
                .collect::<Vec<_>>(),
        })
    }
}

fn record_for(step: usize, sample: &WeightedSample, elapsed: std::time::Duration) -> StepRecord {
    StepRecord {
        step,
        ess: ess(&sample.weights).expect("validated sample"),
        negated_entropy: negated_entropy(&sample.weights).expect("validated sample"),
        cpu_ms: elapsed.as_secs_f64() * 1e3,
        estimate: sample.weighted_mean(),
    }
}

/// Runs the filter over an observation record, starting from `n_particles`
/// initial-law draws. A weight collapse ends the run early and is recorded
/// on the returned trace; other errors abort.
pub fn run_filter<R: Rng + ?Sized>(
    model: &dyn StateSpaceModel,
    observations: &[DVector<f64>],
    config: &FilterConfig,
    rng: &mut R,
) -> Result<FilterTrace> {
    config.validate()?;
    let start = Instant::now();
    let base = rng.next_u64();
    let initial = parallel::map_indexed(config.n_particles, |i| {
        let mut sub = substream(base, salt::FILTER_INIT, i as u64);
        model.initial_sampler(&mut sub)
    });
    let mut sample = WeightedSample::uniform(initial)?;
    let mut trace = FilterTrace::default();
    trace.records.push(record_for(0, &sample, start.elapsed()));
    let mut warm: Option<MixtureParams> = None;
    for (k, observation) in observations.iter().enumerate() {
        let step_start = Instant::now();
        let adapt_now = k % config.adaptation_stride == 0;
        match step_inner(&sample, model, observation, config, warm.as_ref(), adapt_now, rng) {
            Ok(outcome) => {
                sample = outcome.sample;
                if outcome.fitted.is_some() {
                    warm = outcome.fitted;
                }
                if let Some(adaptation) = outcome.adaptation {
                    trace.adaptations.push(adaptation);
                }
                trace.records.push(record_for(k + 1, &sample, step_start.elapsed()));
            }
            Err(Error::FilterCollapse) => {
                trace.collapsed_at = Some(k + 1);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(trace)
}
