//! A 1-D two-expert testbed small enough for tensor-grid quadrature:
//! ancestors x ~ N(0, 1) and target kernel l(x, x') = N(x'; 0.5x, 0.3²).
//! Importance-sampling expectations are replaced by exact grid sums, and an
//! independently coded scalar batch-EM loop serves as the reference the
//! library's update must reproduce.

use nalgebra::DVector;

use crate::adaptation::SuffStats;
use crate::error::{Error, Result};
use crate::experts::{GatingParams, MixtureParams, PreparedMixture};
use crate::selfcheck::oracle;
use crate::strata::extended;

pub const KERNEL_SLOPE: f64 = 0.5;
pub const KERNEL_VARIANCE: f64 = 0.09;
pub const GRID_POINTS: usize = 400;

/// (x, x', mass) triples representing μ̄(dx, dx') = μ(dx) l(x, dx') on a
/// Gauss-Hermite tensor grid; the masses sum to one.
pub fn target_grid() -> Vec<(f64, f64, f64)> {
    let (nodes, weights) = oracle::gauss_hermite(GRID_POINTS);
    let norm = std::f64::consts::PI.sqrt();
    let mut grid = Vec::with_capacity(GRID_POINTS * GRID_POINTS);
    for (tx, wx) in nodes.iter().zip(&weights) {
        let x = std::f64::consts::SQRT_2 * tx;
        for (tc, wc) in nodes.iter().zip(&weights) {
            let child = KERNEL_SLOPE * x + (2.0 * KERNEL_VARIANCE).sqrt() * tc;
            grid.push((x, child, wx * wc / (norm * norm)));
        }
    }
    grid
}

/// Exact sufficient statistics of the mixture under the grid target: what an
/// infinite importance sample would accumulate.
pub fn exact_suff_stats(theta: &MixtureParams, grid: &[(f64, f64, f64)]) -> Result<SuffStats> {
    if matches!(theta.gating, GatingParams::Logistic(_)) {
        return Err(Error::InvalidConfig("grid statistics cover constant gating only".into()));
    }
    if theta.child_dim() != 1 || theta.ancestor_dim() != 1 {
        return Err(Error::InvalidConfig("the quadrature testbed is one-dimensional".into()));
    }
    let prepared = PreparedMixture::new(theta)?;
    let d = theta.n_components();
    let mut stats = SuffStats::zeros(d, 1, 1, false);
    for &(x, child, mass) in grid {
        let ancestor = DVector::from_element(1, x);
        let child = DVector::from_element(1, child);
        let alpha = prepared.gating_weights(&ancestor);
        let terms = prepared.component_terms(&ancestor, &child);
        let (resp, _) = prepared.responsibilities_from(&alpha, &terms);
        let xbar = extended(&ancestor);
        for j in 0..d {
            let p = mass * resp[j];
            stats.p[j] += p;
            let scale = p * prepared.expected_latent_scale(j, terms[j].1);
            let block = &mut stats.s[j];
            block.child_outer.ger(scale, &child, &child, 1.0);
            block.ancestor_outer.ger(scale, &xbar, &xbar, 1.0);
            block.cross.ger(scale, &child, &xbar, 1.0);
        }
    }
    Ok(stats)
}

/// −Σ mass · log r_θ(x, x') over the grid: the adaptation objective up to
/// the θ-free entropy of the target.
pub fn quadrature_objective(theta: &MixtureParams, grid: &[(f64, f64, f64)]) -> Result<f64> {
    let prepared = PreparedMixture::new(theta)?;
    let mut total = 0.0;
    for &(x, child, mass) in grid {
        let ancestor = DVector::from_element(1, x);
        let child = DVector::from_element(1, child);
        total -= mass * prepared.log_density(&ancestor, &child);
    }
    Ok(total)
}

/// Two-expert constant-gating scalar mixture fit by hand-rolled batch EM.
/// Shares nothing with the production update path beyond the grid.
#[derive(Debug, Clone)]
pub struct ScalarEmOracle {
    pub gate: [f64; 2],
    pub slope: [f64; 2],
    pub intercept: [f64; 2],
    pub variance: [f64; 2],
}

impl ScalarEmOracle {
    pub fn from_mixture(theta: &MixtureParams) -> Result<Self> {
        let GatingParams::Constant(gate) = &theta.gating else {
            return Err(Error::InvalidConfig("the scalar oracle uses constant gating".into()));
        };
        if theta.n_components() != 2 || theta.child_dim() != 1 || theta.ancestor_dim() != 1 {
            return Err(Error::InvalidConfig(
                "the scalar oracle covers two one-dimensional experts".into(),
            ));
        }
        let read = |j: usize| {
            let e = &theta.experts[j];
            (e.regression[(0, 0)], e.regression[(0, 1)], e.covariance[(0, 0)])
        };
        let (s0, i0, v0) = read(0);
        let (s1, i1, v1) = read(1);
        Ok(Self {
            gate: [gate[0], gate[1]],
            slope: [s0, s1],
            intercept: [i0, i1],
            variance: [v0, v1],
        })
    }

    /// Flat parameter order: gate₀, then each expert's slope, intercept,
    /// variance.
    pub fn parameter_vector(&self) -> [f64; 7] {
        [
            self.gate[0],
            self.slope[0],
            self.intercept[0],
            self.variance[0],
            self.slope[1],
            self.intercept[1],
            self.variance[1],
        ]
    }

    pub fn parameter_vector_of(theta: &MixtureParams) -> Result<[f64; 7]> {
        Ok(Self::from_mixture(theta)?.parameter_vector())
    }

    fn log_component_density(&self, j: usize, x: f64, child: f64) -> f64 {
        let mean = self.slope[j] * x + self.intercept[j];
        let v = self.variance[j];
        -0.5 * (child - mean) * (child - mean) / v
            - 0.5 * (2.0 * std::f64::consts::PI * v).ln()
    }

    pub fn log_proposal_density(&self, x: f64, child: f64) -> f64 {
        let a = self.gate[0].ln() + self.log_component_density(0, x, child);
        let b = self.gate[1].ln() + self.log_component_density(1, x, child);
        let peak = a.max(b);
        peak + ((a - peak).exp() + (b - peak).exp()).ln()
    }

    // Log space throughout: with fitted variances near 0.09 the raw
    // densities underflow at the grid extremes and would yield 0/0.
    pub fn responsibilities(&self, x: f64, child: f64) -> [f64; 2] {
        let a = self.gate[0].ln() + self.log_component_density(0, x, child);
        let b = self.gate[1].ln() + self.log_component_density(1, x, child);
        let peak = a.max(b);
        let (ea, eb) = ((a - peak).exp(), (b - peak).exp());
        [ea / (ea + eb), eb / (ea + eb)]
    }

    /// One exact E-step/M-step pass over the grid.
    pub fn em_iteration(&mut self, grid: &[(f64, f64, f64)]) {
        let mut m0 = [0.0; 2];
        // Moments of x̄ = (x, 1): [Σ r x², Σ r x, Σ r].
        let mut sxx = [[0.0; 3]; 2];
        // Σ r x' x̄.
        let mut sxy = [[0.0; 2]; 2];
        let mut syy = [0.0; 2];
        for &(x, child, mass) in grid {
            let resp = self.responsibilities(x, child);
            for j in 0..2 {
                let r = mass * resp[j];
                m0[j] += r;
                sxx[j][0] += r * x * x;
                sxx[j][1] += r * x;
                sxx[j][2] += r;
                sxy[j][0] += r * child * x;
                sxy[j][1] += r * child;
                syy[j] += r * child * child;
            }
        }
        let total = m0[0] + m0[1];
        for j in 0..2 {
            let det = sxx[j][0] * sxx[j][2] - sxx[j][1] * sxx[j][1];
            let slope = (sxx[j][2] * sxy[j][0] - sxx[j][1] * sxy[j][1]) / det;
            let intercept = (sxx[j][0] * sxy[j][1] - sxx[j][1] * sxy[j][0]) / det;
            self.slope[j] = slope;
            self.intercept[j] = intercept;
            self.variance[j] = (syy[j] - slope * sxy[j][0] - intercept * sxy[j][1]) / m0[j];
            self.gate[j] = m0[j] / total;
        }
    }

    /// −Σ mass · log r over the grid, from the oracle's own densities.
    pub fn objective(&self, grid: &[(f64, f64, f64)]) -> f64 {
        -grid
            .iter()
            .map(|&(x, child, mass)| mass * self.log_proposal_density(x, child))
            .sum::<f64>()
    }
}
