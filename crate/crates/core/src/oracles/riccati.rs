use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::problems::Terminal;

/// Classical RK4 for a matrix ODE `Y' = f(t, Y)` from `t0` to `t1`
/// (`t1 < t0` integrates backward). Returns every grid value, starting at `t0`.
pub fn rk4_matrix<F>(
    y0: DMatrix<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
    mut f: F,
) -> Result<Vec<DMatrix<f64>>>
where
    F: FnMut(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    if steps == 0 {
        return Err(Error::invalid("rk4 needs at least one step"));
    }
    let h = (t1 - t0) / steps as f64;
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = y0;
    out.push(y.clone());
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = f(t, &y)?;
        let k2 = f(t + 0.5 * h, &(&y + &k1 * (0.5 * h)))?;
        let k3 = f(t + 0.5 * h, &(&y + &k2 * (0.5 * h)))?;
        let k4 = f(t + h, &(&y + &k3 * h))?;
        y = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out.push(y.clone());
    }
    Ok(out)
}

/// Riccati pair for the linear-quadratic benchmark on a uniform grid
/// `t_i = i·T/steps`; the optimal adjoints are `p = −K x`, `q = −M x`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub horizon: f64,
    /// `K(t_i)`, ascending in time.
    pub k: Vec<DMatrix<f64>>,
    /// `M(t_i)`.
    pub m: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    pub fn steps(&self) -> usize {
        self.k.len() - 1
    }

    pub fn k0(&self) -> &DMatrix<f64> {
        &self.k[0]
    }

    pub fn m0(&self) -> &DMatrix<f64> {
        &self.m[0]
    }

    /// `p₀ = −K₀x₀`.
    pub fn p0(&self, x0: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(x0);
        (-(self.k0() * x)).iter().copied().collect()
    }

    /// `½⟨K₀x₀, x₀⟩`.
    pub fn optimal_cost(&self, x0: &[f64]) -> f64 {
        let x = nalgebra::DVector::from_column_slice(x0);
        0.5 * (self.k0() * &x).dot(&x)
    }

    /// Linear interpolation of `(K, M)` at time `t`.
    pub fn at(&self, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = (t / self.horizon).clamp(0.0, 1.0) * self.steps() as f64;
        let i = (s.floor() as usize).min(self.steps() - 1);
        let w = s - i as f64;
        let lerp = |a: &DMatrix<f64>, b: &DMatrix<f64>| a * (1.0 - w) + b * w;
        (lerp(&self.k[i], &self.k[i + 1]), lerp(&self.m[i], &self.m[i + 1]))
    }
}

/// `M` from `(½K + I)M = K/5 − ½K²`.
fn solve_m(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let lhs = k * 0.5 + &eye;
    let rhs = k * 0.2 - (k * k) * 0.5;
    lhs.lu().solve(&rhs).ok_or(Error::Singular("(K/2 + I)"))
}

/// Integrates `K' = ½K² + ½K − (I/5 − ½K)M − ½I`, `K(T) = Q`, backward with
/// RK4, solving for `M` algebraically at every stage.
pub fn riccati_rk4(n: usize, horizon: f64, terminal: Terminal, steps: usize) -> Result<RiccatiSolution> {
    if n == 0 {
        return Err(Error::invalid("riccati needs n >= 1"));
    }
    if steps < 100 {
        return Err(Error::invalid("riccati needs at least 100 steps"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid("riccati horizon must be positive"));
    }
    let q = match terminal {
        Terminal::Identity => DMatrix::identity(n, n),
        Terminal::Ones => DMatrix::from_element(n, n, 1.0),
    };
    let eye = DMatrix::<f64>::identity(n, n);
    let rhs = |_t: f64, k: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let m = solve_m(k)?;
        Ok((k * k) * 0.5 + k * 0.5 - (&eye * 0.2 - k * 0.5) * m - &eye * 0.5)
    };
    let mut backward = rk4_matrix(q.clone(), horizon, 0.0, steps, rhs)?;
    for k in &mut backward {
        let sym = (&*k + k.transpose()) * 0.5;
        *k = sym;
    }
    backward[0] = q;
    backward.reverse();
    let m = backward.iter().map(solve_m).collect::<Result<Vec<_>>>()?;
    Ok(RiccatiSolution {
        horizon,
        k: backward,
        m,
    })
}
