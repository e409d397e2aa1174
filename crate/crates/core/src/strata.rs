//! Curved-exponential proposal strata.
//!
//! A stratum is a conditional location family on the child state: Gaussian
//! N(x'; Λx̄, Σ) or Student-t t_ν(x'; Λx̄, Σ), where x̄ = (xᵀ, 1)ᵀ extends the
//! ancestor with an intercept. The Student-t case is handled through its
//! Gaussian-Gamma representation: conditionally on a latent precision scale
//! u ~ Gamma(ν/2, ν/2) the child is N(x'; Λx̄, Σ/u). Treating the Gaussian as
//! the degenerate case u ≡ 1 lets both families share one sufficient
//! statistic, the scale-weighted outer products (u·x'x'ᵀ, u·x̄x̄ᵀ, u·x'x̄ᵀ),
//! and with it one M-step code path.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg;

const LN_TAU: f64 = 1.837877066409345483560659472811; // ln(2π)

/// Distributional family shared by all experts of one mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StratumFamily {
    Gaussian,
    /// Student-t with fixed degrees of freedom. The tail index is
    /// configuration, never estimated; ν > 2 keeps covariances finite.
    StudentT { dof: f64 },
}

impl StratumFamily {
    pub fn validate(&self) -> Result<()> {
        match self {
            StratumFamily::Gaussian => Ok(()),
            StratumFamily::StudentT { dof } => {
                if dof.is_finite() && *dof > 2.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "Student-t degrees of freedom must be finite and > 2, got {dof}"
                    )))
                }
            }
        }
    }
}

/// Location-scale parameters of one stratum: a regression of the child mean
/// on the extended ancestor, and a child-space covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// p' × (p+1); the last column is the intercept.
    pub regression: DMatrix<f64>,
    /// p' × p', symmetric positive definite.
    pub covariance: DMatrix<f64>,
}

impl ExpertParams {
    pub fn new(regression: DMatrix<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let params = Self { regression, covariance };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regression.ncols() < 2 {
            return Err(Error::DimensionMismatch(
                "regression needs at least one state column plus the intercept".into(),
            ));
        }
        if self.covariance.nrows() != self.covariance.ncols()
            || self.covariance.nrows() != self.regression.nrows()
        {
            return Err(Error::DimensionMismatch(format!(
                "covariance {}x{} incompatible with regression rows {}",
                self.covariance.nrows(),
                self.covariance.ncols(),
                self.regression.nrows()
            )));
        }
        let scale = self.covariance.amax().max(1.0);
        let asym = (&self.covariance - self.covariance.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::InvalidConfig("covariance is not symmetric".into()));
        }
        linalg::robust_cholesky(&self.covariance)?;
        Ok(())
    }

    pub fn child_dim(&self) -> usize {
        self.regression.nrows()
    }

    pub fn ancestor_dim(&self) -> usize {
        self.regression.ncols() - 1
    }

    /// Stratum mean Λx̄ for a plain (non-extended) ancestor.
    pub fn mean(&self, ancestor: &DVector<f64>) -> DVector<f64> {
        self.regression.mul_extended(ancestor)
    }
}

trait MulExtended {
    fn mul_extended(&self, ancestor: &DVector<f64>) -> DVector<f64>;
}

impl MulExtended for DMatrix<f64> {
    /// self · (ancestorᵀ, 1)ᵀ without materializing the extended vector.
    fn mul_extended(&self, ancestor: &DVector<f64>) -> DVector<f64> {
        let mut out = self.column(self.ncols() - 1).into_owned();
        out.gemv(1.0, &self.columns(0, self.ncols() - 1), ancestor, 1.0);
        out
    }
}

/// Ancestor extended with an intercept coordinate: (xᵀ, 1)ᵀ.
pub fn extended(ancestor: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(ancestor.len() + 1);
    out.rows_mut(0, ancestor.len()).copy_from(ancestor);
    out[ancestor.len()] = 1.0;
    out
}

/// One stratum with its covariance factored once, for evaluation loops.
#[derive(Debug, Clone)]
pub(crate) struct PreparedStratum {
    pub regression: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Clean lower factor of the covariance, for draws.
    lower: DMatrix<f64>,
    family: StratumFamily,
    /// Density value at Mahalanobis distance zero (the mode), in log space.
    log_norm: f64,
}

impl PreparedStratum {
    pub fn new(params: &ExpertParams, family: StratumFamily) -> Result<Self> {
        family.validate()?;
        let chol = linalg::robust_cholesky(&params.covariance)?;
        let lower = chol.l();
        let log_det = linalg::log_det(&chol);
        let p = params.child_dim() as f64;
        let log_norm = match family {
            StratumFamily::Gaussian => -0.5 * (p * LN_TAU + log_det),
            StratumFamily::StudentT { dof } => {
                ln_gamma(0.5 * (dof + p))
                    - ln_gamma(0.5 * dof)
                    - 0.5 * p * (dof * std::f64::consts::PI).ln()
                    - 0.5 * log_det
            }
        };
        Ok(Self { regression: params.regression.clone(), chol, lower, family, log_norm })
    }

    pub fn mean(&self, extended_ancestor: &DVector<f64>) -> DVector<f64> {
        &self.regression * extended_ancestor
    }

    /// Log density together with the Mahalanobis distance it was computed
    /// from, so callers can reuse the distance for the latent-scale mean.
    pub fn log_density_and_maha(&self, mean: &DVector<f64>, child: &DVector<f64>) -> (f64, f64) {
        let maha = linalg::quad_form(&self.chol, &(child - mean));
        let log_density = match self.family {
            StratumFamily::Gaussian => self.log_norm - 0.5 * maha,
            StratumFamily::StudentT { dof } => {
                let p = self.regression.nrows() as f64;
                self.log_norm - 0.5 * (dof + p) * (maha / dof).ln_1p()
            }
        };
        (log_density, maha)
    }

    pub fn expected_latent_scale_from_maha(&self, maha: f64) -> f64 {
        match self.family {
            StratumFamily::Gaussian => 1.0,
            StratumFamily::StudentT { dof } => {
                (dof + self.regression.nrows() as f64) / (dof + maha)
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let n = mean.len();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let mut child = mean.clone();
        let scale = match self.family {
            StratumFamily::Gaussian => 1.0,
            StratumFamily::StudentT { dof } => {
                let gamma = Gamma::new(0.5 * dof, 2.0 / dof).expect("validated dof");
                let u: f64 = gamma.sample(rng);
                1.0 / u.sqrt()
            }
        };
        child.gemv(scale, &self.lower, &z, 1.0);
        child
    }
}

/// log N(child; Λx̄, Σ) or log t_ν(child; Λx̄, Σ).
pub fn log_density(
    params: &ExpertParams,
    family: StratumFamily,
    ancestor: &DVector<f64>,
    child: &DVector<f64>,
) -> Result<f64> {
    let prepared = PreparedStratum::new(params, family)?;
    let mean = params.mean(ancestor);
    Ok(prepared.log_density_and_maha(&mean, child).0)
}

/// One draw from the stratum kernel at the given ancestor.
pub fn draw<R: Rng + ?Sized>(
    params: &ExpertParams,
    family: StratumFamily,
    ancestor: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let prepared = PreparedStratum::new(params, family)?;
    let mean = params.mean(ancestor);
    Ok(prepared.draw(&mean, rng))
}

/// Conditional mean of the latent precision scale U given (ancestor, child):
/// (ν+p')/(ν + mahalanobis²) for Student-t, constant 1 for Gaussian.
pub fn expected_latent_scale(
    params: &ExpertParams,
    family: StratumFamily,
    ancestor: &DVector<f64>,
    child: &DVector<f64>,
) -> Result<f64> {
    let prepared = PreparedStratum::new(params, family)?;
    let mean = params.mean(ancestor);
    let (_, maha) = prepared.log_density_and_maha(&mean, child);
    Ok(prepared.expected_latent_scale_from_maha(maha))
}

/// Sufficient statistic of one (ancestor, child) pair at a given latent
/// scale: (u·x'x'ᵀ, u·x̄x̄ᵀ, u·x'x̄ᵀ).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSuffStat {
    /// u · x'x'ᵀ, p' × p'.
    pub child_outer: DMatrix<f64>,
    /// u · x̄x̄ᵀ, (p+1) × (p+1).
    pub ancestor_outer: DMatrix<f64>,
    /// u · x'x̄ᵀ, p' × (p+1).
    pub cross: DMatrix<f64>,
}

impl ExpertSuffStat {
    pub fn zeros(child_dim: usize, ancestor_dim: usize) -> Self {
        Self {
            child_outer: DMatrix::zeros(child_dim, child_dim),
            ancestor_outer: DMatrix::zeros(ancestor_dim + 1, ancestor_dim + 1),
            cross: DMatrix::zeros(child_dim, ancestor_dim + 1),
        }
    }

    /// self = a·self + b·other.
    pub fn scale_add(&mut self, a: f64, other: &Self, b: f64) {
        for (mine, theirs) in [
            (&mut self.child_outer, &other.child_outer),
            (&mut self.ancestor_outer, &other.ancestor_outer),
            (&mut self.cross, &other.cross),
        ] {
            mine.zip_apply(theirs, |m, t| *m = a * *m + b * t);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (&self.child_outer - &other.child_outer)
            .amax()
            .max((&self.ancestor_outer - &other.ancestor_outer).amax())
            .max((&self.cross - &other.cross).amax())
    }
}

pub fn sufficient_stat(
    ancestor: &DVector<f64>,
    child: &DVector<f64>,
    latent_scale: f64,
) -> ExpertSuffStat {
    let xbar = extended(ancestor);
    let mut stat = ExpertSuffStat::zeros(child.len(), ancestor.len());
    stat.child_outer.ger(latent_scale, child, child, 0.0);
    stat.ancestor_outer.ger(latent_scale, &xbar, &xbar, 0.0);
    stat.cross.ger(latent_scale, child, &xbar, 0.0);
    stat
}
