use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Violations above this count as failures.
pub const VIOLATION_TOL: f64 = 1e-10;

type CoefficientFn = Box<dyn Fn(&[f64], &[f64], &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) + Send + Sync>;
type TerminalFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Coefficients of `dX = b dt + σ dW`, `−dY = f dt − Z dW`, `Y_T = g(X_T)`
/// with scalar noise, so `x`, `y`, `z` all live in `ℝⁿ`.
pub struct FbsdeCoefficients {
    pub n: usize,
    /// `(x, y, z) ↦ (−f, b, σ)`.
    pub a: CoefficientFn,
    pub g: TerminalFn,
}

impl FbsdeCoefficients {
    pub fn new<A, G>(n: usize, a: A, g: G) -> Self
    where
        A: Fn(&[f64], &[f64], &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            n,
            a: Box::new(a),
            g: Box::new(g),
        }
    }
}

/// The Hamiltonian system of the `lq` builtin in `(X, Y, Z) = (x, −p, −q)`
/// form:
/// `f = x/2 − y/4 + z/5`, `b = −x/4 − (y+z)/2`, `σ = x/5 − (y+z)/2`, `g = x`.
pub fn lq_fbsde_coefficients(n: usize) -> FbsdeCoefficients {
    FbsdeCoefficients::new(
        n,
        |x, y, z| {
            let mut nf = Vec::with_capacity(x.len());
            let mut b = Vec::with_capacity(x.len());
            let mut s = Vec::with_capacity(x.len());
            for i in 0..x.len() {
                nf.push(-(0.5 * x[i] - 0.25 * y[i] + 0.2 * z[i]));
                b.push(-0.25 * x[i] - 0.5 * (y[i] + z[i]));
                s.push(0.2 * x[i] - 0.5 * (y[i] + z[i]));
            }
            (nf, b, s)
        },
        |x| x.to_vec(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub samples: usize,
    pub nu1: f64,
    pub nu2: f64,
    /// `max ⟨A(u)−A(ū), û⟩ + ν₁|x̂|² + ν₂|ŷ+ẑ|²`; positive means violated.
    pub worst_a_violation: f64,
    /// `max −⟨g(x)−g(x̄), x̂⟩`.
    pub worst_g_violation: f64,
    /// `max ⟨A(u)−A(ū), û⟩ / (|x̂|² + |ŷ+ẑ|²)`, the empirical margin.
    pub worst_ratio: f64,
    /// Index of the first violating pair.
    pub first_violation: Option<usize>,
    pub passed: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dot(&v, &v).sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    for x in &mut v {
        *x *= r / norm;
    }
    v
}

/// Samples pairs `(u, ū)` uniformly from the ball of radius 10 in `ℝ³ⁿ` and
/// checks `⟨A(u)−A(ū), û⟩ ≤ −ν₁|x̂|² − ν₂|ŷ+ẑ|²` and
/// `⟨g(x)−g(x̄), x̂⟩ ≥ 0`.
pub fn monotonicity_check(
    coeffs: &FbsdeCoefficients,
    nu1: f64,
    nu2: f64,
    samples: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    if nu1 < 0.0 || nu2 < 0.0 {
        return Err(Error::invalid("monotonicity constants must be nonnegative"));
    }
    let n = coeffs.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = MonotonicityReport {
        samples,
        nu1,
        nu2,
        worst_a_violation: f64::NEG_INFINITY,
        worst_g_violation: f64::NEG_INFINITY,
        worst_ratio: f64::NEG_INFINITY,
        first_violation: None,
        passed: true,
    };
    for s in 0..samples {
        let u = sample_ball(&mut rng, 3 * n, 10.0);
        let ub = sample_ball(&mut rng, 3 * n, 10.0);
        let (x, y, z) = (&u[..n], &u[n..2 * n], &u[2 * n..]);
        let (xb, yb, zb) = (&ub[..n], &ub[n..2 * n], &ub[2 * n..]);
        let (a1, a2, a3) = (coeffs.a)(x, y, z);
        let (b1, b2, b3) = (coeffs.a)(xb, yb, zb);
        let diff = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(a, b)| a - b).collect() };
        let (xh, yh, zh) = (diff(x, xb), diff(y, yb), diff(z, zb));
        let inner = dot(&diff(&a1, &b1), &xh) + dot(&diff(&a2, &b2), &yh) + dot(&diff(&a3, &b3), &zh);
        let yz: Vec<f64> = yh.iter().zip(&zh).map(|(a, b)| a + b).collect();
        let (xx, yzyz) = (dot(&xh, &xh), dot(&yz, &yz));
        let a_violation = inner + nu1 * xx + nu2 * yzyz;
        let g_violation = -dot(&diff(&(coeffs.g)(x), &(coeffs.g)(xb)), &xh);
        report.worst_a_violation = report.worst_a_violation.max(a_violation);
        report.worst_g_violation = report.worst_g_violation.max(g_violation);
        if xx + yzyz > 0.0 {
            report.worst_ratio = report.worst_ratio.max(inner / (xx + yzyz));
        }
        if (a_violation > VIOLATION_TOL || g_violation > VIOLATION_TOL) && report.first_violation.is_none() {
            report.first_violation = Some(s);
            report.passed = false;
        }
    }
    Ok(report)
}
