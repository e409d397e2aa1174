//! Independently coded reference values for tests.
//!
//! Everything here deliberately avoids the production code paths: linear
//! algebra is Gauss-Jordan on flat slices, integrals are adaptive Simpson or
//! Gauss-Hermite rules built from scratch, and the scalar EM oracle works in
//! plain f64 arithmetic. Tests compare library output against these.

use statrs::function::gamma::ln_gamma;

/// Inverse and determinant of a small row-major matrix via Gauss-Jordan with
/// partial pivoting. Panics on singular input; oracle use only.
pub fn invert(matrix: &[f64], n: usize) -> (Vec<f64>, f64) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let mut det = 1.0;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .unwrap();
        if a[pivot_row * n + col] == 0.0 {
            panic!("singular matrix in oracle invert");
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
                inv.swap(col * n + k, pivot_row * n + k);
            }
            det = -det;
        }
        let pivot = a[col * n + col];
        det *= pivot;
        for k in 0..n {
            a[col * n + k] /= pivot;
            inv[col * n + k] /= pivot;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = a[row * n + col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..n {
                a[row * n + k] -= factor * a[col * n + k];
                inv[row * n + k] -= factor * inv[col * n + k];
            }
        }
    }
    (inv, det)
}

fn quadratic_form(inv: &[f64], n: usize, diff: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += diff[i] * inv[i * n + j] * diff[j];
        }
    }
    total
}

fn simpson_recurse(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let refined = left + right;
    if depth == 0 || (refined - whole).abs() <= 15.0 * tol {
        refined + (refined - whole) / 15.0
    } else {
        simpson_recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson over [a, b]. The interval is pre-split into panels so a
/// narrow peak inside a wide domain cannot fool the error estimate.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let panels = 64;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let lo = a + k as f64 * h;
        let hi = lo + h;
        let m = 0.5 * (lo + hi);
        let (flo, fm, fhi) = (f(lo), f(m), f(hi));
        let whole = (hi - lo) / 6.0 * (flo + 4.0 * fm + fhi);
        total += simpson_recurse(&f, lo, hi, flo, fm, fhi, whole, tol / panels as f64, 48);
    }
    total
}

/// ∫ f over [center − half_width, center + half_width].
pub fn integrate_1d(f: impl Fn(f64) -> f64, center: f64, half_width: f64) -> f64 {
    adaptive_simpson(f, center - half_width, center + half_width, 1e-11)
}

/// ∫∫ f(x, y) dx dy in polar coordinates around the origin: the angular
/// average on a trapezoid grid (spectrally accurate for smooth densities),
/// then adaptive Simpson in the radius. `scale_hint` marks where the density
/// mass lives so the inner panel is resolved separately from the far tail.
pub fn integrate_radial_2d(
    f: impl Fn(f64, f64) -> f64,
    scale_hint: f64,
    rmax: f64,
) -> f64 {
    let angles = 256;
    let ring = |r: f64| -> f64 {
        let mut total = 0.0;
        for k in 0..angles {
            let phi = std::f64::consts::TAU * k as f64 / angles as f64;
            total += f(r * phi.cos(), r * phi.sin());
        }
        r * total * std::f64::consts::TAU / angles as f64
    };
    let split = (10.0 * scale_hint).min(rmax);
    adaptive_simpson(&ring, 0.0, split, 1e-11) + adaptive_simpson(&ring, split, rmax, 1e-11)
}

/// Unnormalized Gaussian-Gamma integrand over the latent scale u, with the
/// child already reduced to its quadratic form `delta`:
/// u^{p/2}·exp(−u·delta/2) · u^{ν/2−1}·exp(−ν·u/2).
fn latent_scale_weight(u: f64, dim: usize, delta: f64, dof: f64) -> f64 {
    let log_w = (0.5 * dim as f64 + 0.5 * dof - 1.0) * u.ln() - 0.5 * u * (delta + dof);
    log_w.exp()
}

fn latent_scale_moments(dim: usize, delta: f64, dof: f64) -> (f64, f64) {
    // Integrate over t = ln u so both the u→0 and u→∞ ends taper smoothly.
    let mass = adaptive_simpson(
        |t: f64| {
            let u = t.exp();
            latent_scale_weight(u, dim, delta, dof) * u
        },
        -60.0,
        30.0,
        1e-14,
    );
    let first_moment = adaptive_simpson(
        |t: f64| {
            let u = t.exp();
            latent_scale_weight(u, dim, delta, dof) * u * u
        },
        -60.0,
        30.0,
        1e-14,
    );
    (mass, first_moment)
}

/// log ∫ N(child; mean, Σ/u)·Gamma(u; ν/2, ν/2) du by quadrature.
pub fn student_log_density_by_quadrature(
    sigma: &[f64],
    dim: usize,
    mean: &[f64],
    child: &[f64],
    dof: f64,
) -> f64 {
    let (inv, det) = invert(sigma, dim);
    let diff: Vec<f64> = child.iter().zip(mean).map(|(c, m)| c - m).collect();
    let delta = quadratic_form(&inv, dim, &diff);
    let (mass, _) = latent_scale_moments(dim, delta, dof);
    let log_constants = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * det.ln()
        + 0.5 * dof * (0.5 * dof).ln()
        - ln_gamma(0.5 * dof);
    log_constants + mass.ln()
}

/// E[U | ancestor, child] under the Gaussian-Gamma representation, as a
/// ratio of quadratures.
pub fn conditional_scale_by_quadrature(
    sigma: &[f64],
    dim: usize,
    mean: &[f64],
    child: &[f64],
    dof: f64,
) -> f64 {
    let (inv, _) = invert(sigma, dim);
    let diff: Vec<f64> = child.iter().zip(mean).map(|(c, m)| c - m).collect();
    let delta = quadratic_form(&inv, dim, &diff);
    let (mass, first_moment) = latent_scale_moments(dim, delta, dof);
    first_moment / mass
}

/// Gauss-Hermite nodes and weights (physicists' convention:
/// ∫ e^{−t²} f(t) dt ≈ Σ wᵢ f(tᵢ)), from the Jacobi matrix eigendecomposition.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    use nalgebra::DMatrix;
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (0.5 * k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eigen = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eigen.eigenvalues[i];
            let v0 = eigen.eigenvectors[(0, i)];
            (node, std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// One-sample Kolmogorov-Smirnov statistic against a reference CDF. Sorts
/// the sample in place.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Expectation of f under N(mean, variance) by Gauss-Hermite quadrature.
pub fn gauss_hermite_expectation(
    f: impl Fn(f64) -> f64,
    mean: f64,
    variance: f64,
    points: usize,
) -> f64 {
    let (nodes, weights) = gauss_hermite(points);
    let scale = (2.0 * variance).sqrt();
    let mut total = 0.0;
    for (t, w) in nodes.iter().zip(&weights) {
        total += w * f(mean + scale * t);
    }
    total / std::f64::consts::PI.sqrt()
}
