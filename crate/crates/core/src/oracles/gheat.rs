use crate::error::{Error, Result};

/// `Ê[Σᵢ xᵢ²]` at time `T` from the origin under volatility uncertainty
/// `[σ̲, σ̄]` per coordinate: `n·σ̄²·T`.
///
/// The 1-d value is cross-checked against [`gheat_1d`] and additivity across
/// coordinates against [`gheat_2d`] in the tests.
pub fn gexp_exact_quadratic(n: usize, sigma_hi: f64, horizon: f64) -> f64 {
    n as f64 * sigma_hi * sigma_hi * horizon
}

/// Uniform spatial grid on `[−half_width, half_width]` per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GHeatGrid {
    pub half_width: f64,
    pub nodes: usize,
    /// Time step as a fraction of the explicit stability limit `dx²/σ̄²`
    /// (per axis count).
    pub cfl: f64,
}

impl Default for GHeatGrid {
    fn default() -> Self {
        Self {
            half_width: 10.0,
            nodes: 2000,
            cfl: 0.4,
        }
    }
}

impl GHeatGrid {
    fn validate(&self) -> Result<()> {
        if self.nodes < 5 || !(self.half_width > 0.0) || !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::invalid(format!("bad G-heat grid {self:?}")));
        }
        Ok(())
    }

    fn dx(&self) -> f64 {
        2.0 * self.half_width / (self.nodes - 1) as f64
    }

    fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx()
    }

    /// Linear interpolation weights of `x`: `(i, w)` with value `(1−w)v[i] + w·v[i+1]`.
    fn locate(&self, x: f64) -> Result<(usize, f64)> {
        if x.abs() > self.half_width {
            return Err(Error::invalid("evaluation point outside the G-heat grid"));
        }
        let s = (x + self.half_width) / self.dx();
        let i = (s.floor() as usize).min(self.nodes - 2);
        Ok((i, s - i as f64))
    }
}

/// `G(a) = ½ sup_{θ∈[σ̲,σ̄]} θ²a`.
fn g_fn(a: f64, lo2: f64, hi2: f64) -> f64 {
    0.5 * if a >= 0.0 { hi2 * a } else { lo2 * a }
}

fn check_bounds(sigma_lo: f64, sigma_hi: f64, horizon: f64) -> Result<()> {
    if !(sigma_lo > 0.0 && sigma_lo <= sigma_hi && horizon > 0.0) {
        return Err(Error::invalid("G-heat needs 0 < sigma_lo <= sigma_hi and T > 0"));
    }
    Ok(())
}

/// Explicit finite differences for `v_s = G(v_xx)`, `v(0) = φ`, returning
/// `v(T, x0)`. Boundary nodes reuse the second difference of their
/// neighbour.
pub fn gheat_1d<F>(
    phi: F,
    sigma_lo: f64,
    sigma_hi: f64,
    horizon: f64,
    x0: f64,
    grid: &GHeatGrid,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    check_bounds(sigma_lo, sigma_hi, horizon)?;
    grid.validate()?;
    let (lo2, hi2) = (sigma_lo * sigma_lo, sigma_hi * sigma_hi);
    let n = grid.nodes;
    let dx = grid.dx();
    let steps = (horizon / (grid.cfl * dx * dx / hi2)).ceil() as usize;
    let dt = horizon / steps as f64;
    let mut v: Vec<f64> = (0..n).map(|i| phi(grid.coord(i))).collect();
    let mut d2 = vec![0.0; n];
    for _ in 0..steps {
        for i in 1..n - 1 {
            d2[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (dx * dx);
        }
        d2[0] = d2[1];
        d2[n - 1] = d2[n - 2];
        for (vi, &a) in v.iter_mut().zip(&d2) {
            *vi += dt * g_fn(a, lo2, hi2);
        }
    }
    let (i, w) = grid.locate(x0)?;
    Ok((1.0 - w) * v[i] + w * v[i + 1])
}

/// Two-dimensional analogue with independent uncertainty per axis,
/// `v_s = G(v_x₁x₁) + G(v_x₂x₂)`; returns `v(T, x0)`.
pub fn gheat_2d<F>(
    phi: F,
    sigma_lo: f64,
    sigma_hi: f64,
    horizon: f64,
    x0: [f64; 2],
    grid: &GHeatGrid,
) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    check_bounds(sigma_lo, sigma_hi, horizon)?;
    grid.validate()?;
    let (lo2, hi2) = (sigma_lo * sigma_lo, sigma_hi * sigma_hi);
    let n = grid.nodes;
    let dx = grid.dx();
    let steps = (horizon / (0.5 * grid.cfl * dx * dx / hi2)).ceil() as usize;
    let dt = horizon / steps as f64;
    let idx = |i: usize, j: usize| i * n + j;
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            v[idx(i, j)] = phi(grid.coord(i), grid.coord(j));
        }
    }
    let clampi = |i: usize| i.clamp(1, n - 2);
    let mut inc = vec![0.0; n * n];
    for _ in 0..steps {
        for i in 0..n {
            for j in 0..n {
                let (ci, cj) = (clampi(i), clampi(j));
                let a = (v[idx(ci + 1, j)] - 2.0 * v[idx(ci, j)] + v[idx(ci - 1, j)]) / (dx * dx);
                let b = (v[idx(i, cj + 1)] - 2.0 * v[idx(i, cj)] + v[idx(i, cj - 1)]) / (dx * dx);
                inc[idx(i, j)] = dt * (g_fn(a, lo2, hi2) + g_fn(b, lo2, hi2));
            }
        }
        for (vi, d) in v.iter_mut().zip(&inc) {
            *vi += d;
        }
    }
    let (i, wi) = grid.locate(x0[0])?;
    let (j, wj) = grid.locate(x0[1])?;
    Ok((1.0 - wi) * (1.0 - wj) * v[idx(i, j)]
        + wi * (1.0 - wj) * v[idx(i + 1, j)]
        + (1.0 - wi) * wj * v[idx(i, j + 1)]
        + wi * wj * v[idx(i + 1, j + 1)])
}
