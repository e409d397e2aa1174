//! State-space models: the prior kernel, local likelihood and initial law
//! behind a filter run, plus three benchmark models with closed-form
//! reference quantities where those exist.

mod bessel;
mod linear_gaussian;
mod tobit;

pub use bessel::BesselModel;
pub use linear_gaussian::{lg_optimal_kernel, LinearGaussianMixtureModel};
pub use tobit::TobitModel;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::experts::{LogKernel, ProposalKernel};

/// A time-homogeneous state-space model. The transition density q is also
/// called the prior kernel; together with the local likelihood g it forms
/// the model kernel l(x, x') = g(x', y) q(x, x') that filtering steps
/// integrate over.
pub trait StateSpaceModel: Sync {
    fn dim_state(&self) -> usize;

    fn dim_obs(&self) -> usize;

    /// Draws from the initial law.
    fn initial_sampler(&self, rng: &mut dyn Rng) -> DVector<f64>;

    /// log q(ancestor, child).
    fn prior_log_density(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64;

    /// Draws a child from q(ancestor, ·).
    fn prior_sampler(&self, ancestor: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64>;

    /// log g(child, y).
    fn loglik(&self, child: &DVector<f64>, y: &DVector<f64>) -> Result<f64>;

    /// Draws an observation of the given state.
    fn observation_sampler(&self, state: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64>;

    /// Rejects observations the model's likelihood is undefined for.
    fn validate_observation(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.dim_obs() {
            return Err(Error::DimensionMismatch(format!(
                "observation of dim {} for a model with dim {}",
                y.len(),
                self.dim_obs()
            )));
        }
        Ok(())
    }

    /// True when the normalized optimal kernel and the optimal adjustment
    /// are available in closed form.
    fn has_closed_form_optimal(&self) -> bool {
        false
    }

    /// Closed-form normalized optimal kernel L̄(ancestor, ·): the posterior
    /// law of the child given the ancestor and the observation.
    fn optimal_kernel(&self, _ancestor: &DVector<f64>, _y: &DVector<f64>) -> Option<GaussianMixture> {
        None
    }

    /// Closed-form optimal adjustment L*(ancestor) = ∫ g(x', y) q(x, x') dx'.
    fn optimal_adjustment(&self, _ancestor: &DVector<f64>, _y: &DVector<f64>) -> Option<f64> {
        None
    }
}

/// The model kernel l(x, x') = g(x', y) q(x, x') at one fixed observation.
pub struct ObservationKernel<'a> {
    model: &'a dyn StateSpaceModel,
    y: DVector<f64>,
}

impl<'a> ObservationKernel<'a> {
    pub fn new(model: &'a dyn StateSpaceModel, y: DVector<f64>) -> Result<Self> {
        model.validate_observation(&y)?;
        Ok(Self { model, y })
    }

    pub fn observation(&self) -> &DVector<f64> {
        &self.y
    }
}

impl LogKernel for ObservationKernel<'_> {
    fn evaluate(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64 {
        let loglik =
            self.model.loglik(child, &self.y).expect("observation validated at construction");
        loglik + self.model.prior_log_density(ancestor, child)
    }
}

/// Proposes children straight from the prior kernel.
pub struct PriorProposal<'a> {
    pub model: &'a dyn StateSpaceModel,
}

impl ProposalKernel for PriorProposal<'_> {
    fn log_density(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64 {
        self.model.prior_log_density(ancestor, child)
    }

    fn draw_child(&self, ancestor: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64> {
        self.model.prior_sampler(ancestor, rng)
    }
}

/// Proposes children from the closed-form optimal kernel.
pub struct OptimalProposal<'a> {
    model: &'a dyn StateSpaceModel,
    y: DVector<f64>,
}

impl<'a> OptimalProposal<'a> {
    pub fn new(model: &'a dyn StateSpaceModel, y: DVector<f64>) -> Result<Self> {
        model.validate_observation(&y)?;
        if !model.has_closed_form_optimal() {
            return Err(Error::InvalidConfig(
                "this model has no closed-form optimal kernel".into(),
            ));
        }
        Ok(Self { model, y })
    }

    fn kernel_at(&self, ancestor: &DVector<f64>) -> GaussianMixture {
        self.model
            .optimal_kernel(ancestor, &self.y)
            .expect("closed form checked at construction")
    }
}

impl ProposalKernel for OptimalProposal<'_> {
    fn log_density(&self, ancestor: &DVector<f64>, child: &DVector<f64>) -> f64 {
        self.kernel_at(ancestor).log_density(child)
    }

    fn draw_child(&self, ancestor: &DVector<f64>, rng: &mut dyn Rng) -> DVector<f64> {
        self.kernel_at(ancestor).draw(rng)
    }
}

/// A finite mixture of Gaussians with explicit moments, as returned by
/// closed-form posterior computations.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let mut peak = f64::NEG_INFINITY;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.covariances))
            .map(|(w, (mean, cov))| {
                if *w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let normal = crate::linalg::MvNormal::new(cov).expect("mixture covariance is SPD");
                let term = w.ln() + normal.log_density(mean, x);
                peak = peak.max(term);
                term
            })
            .collect();
        if peak == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        peak + terms.iter().map(|t| (t - peak).exp()).sum::<f64>().ln()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        use rand::RngExt;
        let total: f64 = self.weights.iter().sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut cumulative = 0.0;
        let mut component = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            cumulative += w;
            if u < cumulative {
                component = j;
                break;
            }
        }
        let normal = crate::linalg::MvNormal::new(&self.covariances[component])
            .expect("mixture covariance is SPD");
        normal.draw(&self.means[component], rng)
    }
}

/// Simulates a trajectory: `steps` transitions from a draw of the initial
/// law, observing each new state. Returns (states x₀..x_T, observations
/// y₁..y_T).
pub fn simulate<R: Rng>(
    model: &dyn StateSpaceModel,
    steps: usize,
    rng: &mut R,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    states.push(model.initial_sampler(rng));
    for _ in 0..steps {
        let next = model.prior_sampler(states.last().expect("seeded above"), rng);
        observations.push(model.observation_sampler(&next, rng));
        states.push(next);
    }
    (states, observations)
}

/// Parses observation records, one comma-separated row per step. A leading
/// non-numeric row is treated as a header and skipped.
pub fn parse_observation_rows(text: &str) -> Result<Vec<DVector<f64>>> {
    let mut rows = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|field| field.trim().parse::<f64>()).collect();
        match values {
            Ok(values) => rows.push(DVector::from_vec(values)),
            Err(e) if rows.is_empty() && index == 0 => {
                let _ = e; // header row
            }
            Err(e) => {
                return Err(Error::InvalidConfig(format!(
                    "observation row {}: {e}",
                    index + 1
                )));
            }
        }
    }
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(Error::InvalidConfig("observation rows differ in length".into()));
        }
    }
    Ok(rows)
}
