//! Time grids, Brownian increments and Euler–Maruyama rollouts of the
//! first-order and second-order Hamiltonian systems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::problems::{ControlProblem, Diffusion, Dims};
use crate::tensor::Tensor;

/// Uniform grid `tᵢ = i·T/N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.horizon / self.steps as f64
    }
}

/// SplitMix64 finalizer; derives independent seeds from structured ids.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Brownian increments, stored `M×N×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBatch {
    increments: Tensor,
    seed: u64,
    first_sample: u64,
    dt: f64,
}

impl BrownianBatch {
    /// Sample `j` draws from its own ChaCha stream `first_sample + j` under
    /// `seed`, so increment `(j, i)` does not depend on how the batch is
    /// partitioned.
    pub fn sample(grid: &TimeGrid, samples: usize, dim: usize, seed: u64, first_sample: u64) -> Self {
        let (n_steps, sd) = (grid.steps(), grid.dt().sqrt());
        let mut data = Vec::with_capacity(samples * n_steps * dim);
        for j in 0..samples {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(first_sample + j as u64);
            for _ in 0..n_steps * dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(sd * z);
            }
        }
        Self {
            increments: Tensor::new(vec![samples, n_steps, dim], data).expect("brownian shape"),
            seed,
            first_sample,
            dt: grid.dt(),
        }
    }

    pub fn samples(&self) -> usize {
        self.increments.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.increments.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.increments.shape()[2]
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn first_sample(&self) -> u64 {
        self.first_sample
    }

    pub fn increments(&self) -> &Tensor {
        &self.increments
    }

    /// `M×d` increments of step `i`.
    pub fn step(&self, i: usize) -> Tensor {
        let (m, n, d) = (self.samples(), self.steps(), self.dim());
        let src = self.increments.data();
        let mut out = Vec::with_capacity(m * d);
        for j in 0..m {
            out.extend_from_slice(&src[(j * n + i) * d..(j * n + i + 1) * d]);
        }
        Tensor::matrix(m, d, out).expect("step shape")
    }

    /// Sums groups of `factor` consecutive increments: the same Brownian paths
    /// on a grid with `N / factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let (m, n, d) = (self.samples(), self.steps(), self.dim());
        if factor == 0 || n % factor != 0 {
            return Err(Error::invalid(format!("cannot coarsen {n} steps by {factor}")));
        }
        let nc = n / factor;
        let src = self.increments.data();
        let mut out = vec![0.0; m * nc * d];
        for j in 0..m {
            for i in 0..n {
                for c in 0..d {
                    out[(j * nc + i / factor) * d + c] += src[(j * n + i) * d + c];
                }
            }
        }
        Ok(Self {
            increments: Tensor::new(vec![m, nc, d], out)?,
            seed: self.seed,
            first_sample: self.first_sample,
            dt: self.dt * factor as f64,
        })
    }
}

/// Trajectories recorded on a graph. Index `i` of `xs`/`ps` is time `tᵢ`;
/// `qs`/`us` hold the per-step values used on `[tᵢ, tᵢ₊₁)`.
#[derive(Debug, Clone, Default)]
pub struct PathBatch {
    pub xs: Vec<Var>,
    pub ps: Vec<Var>,
    pub qs: Vec<Var>,
    pub us: Vec<Var>,
    /// Second-order adjoint `P̃ᵢ`, `B×(n·n)`.
    pub big_ps: Vec<Var>,
    /// `Q̃ᵢ`, `B×(d·n·n)`: `d` consecutive `n×n` blocks.
    pub big_qs: Vec<Var>,
    /// `Σᵢ |H_u|²` per sample, `B×1`.
    pub penalty: Option<Var>,
}

impl PathBatch {
    pub fn terminal_x(&self) -> Var {
        *self.xs.last().expect("non-empty path")
    }

    pub fn terminal_p(&self) -> Var {
        *self.ps.last().expect("path carries adjoints")
    }

    pub fn batch(&self, g: &Graph) -> usize {
        g.rows(self.xs[0])
    }

    /// Copies the recorded values into `M×steps×width` arrays.
    pub fn materialize(&self, g: &Graph) -> PathData {
        let stack = |vs: &[Var]| -> Option<Tensor> {
            let first = vs.first()?;
            let (m, w) = (g.rows(*first), g.cols(*first));
            let mut data = vec![0.0; m * vs.len() * w];
            for (i, v) in vs.iter().enumerate() {
                let t = g.value(*v);
                for j in 0..m {
                    let row = if t.rows() == 1 { t.row_slice(0) } else { t.row_slice(j) };
                    data[(j * vs.len() + i) * w..][..w].copy_from_slice(row);
                }
            }
            Some(Tensor::new(vec![m, vs.len(), w], data).expect("path shape"))
        };
        PathData {
            x: stack(&self.xs).expect("path has states"),
            p: stack(&self.ps),
            q: stack(&self.qs),
            u: stack(&self.us),
            big_p: stack(&self.big_ps),
            big_q: stack(&self.big_qs),
            penalty: self.penalty.map(|v| g.value(v).clone()),
        }
    }
}

/// Plain-array view of a [`PathBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct PathData {
    pub x: Tensor,
    pub p: Option<Tensor>,
    pub q: Option<Tensor>,
    pub u: Option<Tensor>,
    pub big_p: Option<Tensor>,
    pub big_q: Option<Tensor>,
    pub penalty: Option<Tensor>,
}

fn at_step<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::Diverged { step, what },
        other => other,
    })
}

fn start_states(g: &mut Graph, x0: Var, p0: Var, batch: usize) -> Result<(Var, Var)> {
    let x = if g.rows(x0) == batch { x0 } else { g.broadcast_rows(x0, batch)? };
    let p = if g.rows(p0) == batch { p0 } else { g.broadcast_rows(p0, batch)? };
    Ok((x, p))
}

fn check_brownian(dims: Dims, grid: &TimeGrid, dw: &BrownianBatch) -> Result<()> {
    if dw.dim() != dims.d || dw.steps() != grid.steps() {
        return Err(Error::ShapeMismatch {
            op: "rollout",
            lhs: dw.increments().shape().to_vec(),
            rhs: vec![dw.samples(), grid.steps(), dims.d],
        });
    }
    Ok(())
}

/// Euler scheme for `(x, p)` with `q̃ᵢ = q_policy(i, tᵢ, x̃ᵢ, p̃ᵢ)` and
/// `ũᵢ = u_policy(i, tᵢ, x̃ᵢ, p̃ᵢ, q̃ᵢ)`:
/// `x̃ᵢ₊₁ = x̃ᵢ + bΔt + σΔW`, `p̃ᵢ₊₁ = p̃ᵢ − H_xΔt + q̃ᵢΔW`.
///
/// With `accumulate_penalty` the unweighted `Σᵢ|H_u|²` is recorded.
#[allow(clippy::too_many_arguments)]
pub fn rollout_first_order<QP, UP>(
    prob: &dyn ControlProblem,
    g: &mut Graph,
    grid: &TimeGrid,
    dw: &BrownianBatch,
    x0: Var,
    p0: Var,
    mut q_policy: QP,
    mut u_policy: UP,
    accumulate_penalty: bool,
) -> Result<PathBatch>
where
    QP: FnMut(&mut Graph, usize, f64, Var, Var) -> Result<Var>,
    UP: FnMut(&mut Graph, usize, f64, Var, Var, Var) -> Result<Var>,
{
    let dims = prob.dims();
    check_brownian(dims, grid, dw)?;
    let dt = grid.dt();
    let (mut x, mut p) = start_states(g, x0, p0, dw.samples())?;
    let mut paths = PathBatch {
        xs: vec![x],
        ps: vec![p],
        ..PathBatch::default()
    };
    for i in 0..grid.steps() {
        let t = grid.t(i);
        let mut step = |g: &mut Graph| -> Result<(Var, Var, Var, Var, Option<Var>)> {
            let q = q_policy(g, i, t, x, p)?;
            let u = u_policy(g, i, t, x, p, q)?;
            let dwi = g.constant(dw.step(i))?;
            let b = prob.drift(g, t, x, u)?;
            let sigma = prob.diffusion(g, t, x, u)?;
            let hx = prob.hamiltonian_x(g, t, x, u, p, q)?;
            let bdt = g.scale(b, dt)?;
            let sdw = sigma.apply(g, dwi)?;
            let xn = g.add(x, bdt)?;
            let xn = g.add(xn, sdw)?;
            let hdt = g.scale(hx, dt)?;
            let qdw = g.bmm(q, dwi, dims.n, dims.d, 1)?;
            let pn = g.sub(p, hdt)?;
            let pn = g.add(pn, qdw)?;
            let pen = if accumulate_penalty {
                let hu = prob.hamiltonian_u(g, t, x, u, p, q)?;
                let sq = g.square(hu)?;
                Some(g.sum_cols(sq)?)
            } else {
                None
            };
            Ok((q, u, xn, pn, pen))
        };
        let (q, u, xn, pn, pen) = at_step(i, step(g))?;
        if let Some(pen) = pen {
            paths.penalty = Some(match paths.penalty {
                Some(acc) => at_step(i, g.add(acc, pen))?,
                None => pen,
            });
        }
        paths.qs.push(q);
        paths.us.push(u);
        paths.xs.push(xn);
        paths.ps.push(pn);
        x = xn;
        p = pn;
    }
    Ok(paths)
}

/// Euler scheme for the control-free system
/// `x̃ᵢ₊₁ = x̃ᵢ + H̄_pΔt + H̄_qΔW`, `p̃ᵢ₊₁ = p̃ᵢ − H̄_xΔt + q̃ᵢΔW`.
/// No controls are recorded.
pub fn rollout_hbar<QP>(
    prob: &dyn ControlProblem,
    g: &mut Graph,
    grid: &TimeGrid,
    dw: &BrownianBatch,
    x0: Var,
    p0: Var,
    mut q_policy: QP,
) -> Result<PathBatch>
where
    QP: FnMut(&mut Graph, usize, f64, Var, Var) -> Result<Var>,
{
    let dims = prob.dims();
    if !prob.capabilities().hbar {
        return Err(prob.missing("H̄"));
    }
    check_brownian(dims, grid, dw)?;
    let dt = grid.dt();
    let (mut x, mut p) = start_states(g, x0, p0, dw.samples())?;
    let mut paths = PathBatch {
        xs: vec![x],
        ps: vec![p],
        ..PathBatch::default()
    };
    for i in 0..grid.steps() {
        let t = grid.t(i);
        let mut step = |g: &mut Graph| -> Result<(Var, Var, Var)> {
            let q = q_policy(g, i, t, x, p)?;
            let dwi = g.constant(dw.step(i))?;
            let hp = prob.hbar_p(g, t, x, p, q)?;
            let hq = prob.hbar_q(g, t, x, p, q)?;
            let hx = prob.hbar_x(g, t, x, p, q)?;
            let a = g.scale(hp, dt)?;
            let s = hq.apply(g, dwi)?;
            let xn = g.add(x, a)?;
            let xn = g.add(xn, s)?;
            let c = g.scale(hx, dt)?;
            let qdw = g.bmm(q, dwi, dims.n, dims.d, 1)?;
            let pn = g.sub(p, c)?;
            let pn = g.add(pn, qdw)?;
            Ok((q, xn, pn))
        };
        let (q, xn, pn) = at_step(i, step(g))?;
        paths.qs.push(q);
        paths.xs.push(xn);
        paths.ps.push(pn);
        x = xn;
        p = pn;
    }
    Ok(paths)
}

/// State-only Euler scheme with `ũᵢ = u_policy(i, tᵢ, x̃ᵢ)`; no adjoints are
/// simulated (`ps` stays empty).
pub fn rollout_forward<UP>(
    prob: &dyn ControlProblem,
    g: &mut Graph,
    grid: &TimeGrid,
    dw: &BrownianBatch,
    x0: Var,
    mut u_policy: UP,
) -> Result<PathBatch>
where
    UP: FnMut(&mut Graph, usize, f64, Var) -> Result<Var>,
{
    check_brownian(prob.dims(), grid, dw)?;
    let dt = grid.dt();
    let mut x = if g.rows(x0) == dw.samples() {
        x0
    } else {
        g.broadcast_rows(x0, dw.samples())?
    };
    let mut paths = PathBatch {
        xs: vec![x],
        ..PathBatch::default()
    };
    for i in 0..grid.steps() {
        let t = grid.t(i);
        let mut step = |g: &mut Graph| -> Result<(Var, Var)> {
            let u = u_policy(g, i, t, x)?;
            let dwi = g.constant(dw.step(i))?;
            let b = prob.drift(g, t, x, u)?;
            let sigma = prob.diffusion(g, t, x, u)?;
            let bdt = g.scale(b, dt)?;
            let sdw = sigma.apply(g, dwi)?;
            let xn = g.add(x, bdt)?;
            Ok((u, g.add(xn, sdw)?))
        };
        let (u, xn) = at_step(i, step(g))?;
        paths.us.push(u);
        paths.xs.push(xn);
        x = xn;
    }
    Ok(paths)
}

/// `(A + Aᵀ)/2` for each `n×n` block of every row.
pub fn symmetrize_blocks(g: &mut Graph, a: Var, n: usize) -> Result<Var> {
    let blocks = g.cols(a) / (n * n);
    let mut idx = Vec::with_capacity(blocks * n * n);
    for b in 0..blocks {
        for i in 0..n {
            for j in 0..n {
                idx.push(b * n * n + j * n + i);
            }
        }
    }
    let at = g.gather_cols(a, &idx)?;
    let s = g.add(a, at)?;
    g.scale(s, 0.5)
}

/// `F = b_xᵀP + Pb_x + Σⱼσ_xʲᵀPσ_xʲ + Σⱼ(σ_xʲᵀQⱼ + Qⱼσ_xʲ) + H_xx`, `B×(n·n)`.
pub fn second_order_drift(
    g: &mut Graph,
    dims: Dims,
    b_x: Var,
    sigma_x: Var,
    h_xx: Var,
    big_p: Var,
    big_q: Var,
) -> Result<Var> {
    let n = dims.n;
    let bxt = g.transpose_blocks(b_x, n, n)?;
    let a = g.bmm(bxt, big_p, n, n, n)?;
    let b = g.bmm(big_p, b_x, n, n, n)?;
    let mut f = g.add(a, b)?;
    for j in 0..dims.d {
        let sj = g.slice_cols(sigma_x, j * n * n, n * n)?;
        let sjt = g.transpose_blocks(sj, n, n)?;
        let ps = g.bmm(big_p, sj, n, n, n)?;
        let sps = g.bmm(sjt, ps, n, n, n)?;
        let qj = g.slice_cols(big_q, j * n * n, n * n)?;
        let sq = g.bmm(sjt, qj, n, n, n)?;
        let qs = g.bmm(qj, sj, n, n, n)?;
        f = g.add(f, sps)?;
        f = g.add(f, sq)?;
        f = g.add(f, qs)?;
    }
    g.add(f, h_xx)
}

/// First-order rollout extended with the second-order adjoint
/// `P̃ᵢ₊₁ = P̃ᵢ − FΔt + Σⱼ Q̃ⱼᵢΔWʲ`, symmetrized after every step.
/// `Q_policy` outputs are symmetrized blockwise before use.
#[allow(clippy::too_many_arguments)]
pub fn rollout_second_order<QP, BQP, UP>(
    prob: &dyn ControlProblem,
    g: &mut Graph,
    grid: &TimeGrid,
    dw: &BrownianBatch,
    x0: Var,
    p0: Var,
    big_p0: Var,
    mut q_policy: QP,
    mut big_q_policy: BQP,
    mut u_policy: UP,
) -> Result<PathBatch>
where
    QP: FnMut(&mut Graph, usize, f64, Var, Var) -> Result<Var>,
    BQP: FnMut(&mut Graph, usize, f64, Var, Var) -> Result<Var>,
    UP: FnMut(&mut Graph, usize, f64, Var, Var, Var, Var) -> Result<Var>,
{
    let dims = prob.dims();
    if !prob.capabilities().second_order {
        return Err(prob.missing("second-order derivatives"));
    }
    check_brownian(dims, grid, dw)?;
    let (n, d) = (dims.n, dims.d);
    let dt = grid.dt();
    let batch = dw.samples();
    let (mut x, mut p) = start_states(g, x0, p0, batch)?;
    let mut big_p = if g.rows(big_p0) == batch {
        big_p0
    } else {
        g.broadcast_rows(big_p0, batch)?
    };
    big_p = symmetrize_blocks(g, big_p, n)?;
    let mut paths = PathBatch {
        xs: vec![x],
        ps: vec![p],
        big_ps: vec![big_p],
        ..PathBatch::default()
    };
    for i in 0..grid.steps() {
        let t = grid.t(i);
        let mut step = |g: &mut Graph| -> Result<[Var; 6]> {
            let q = q_policy(g, i, t, x, p)?;
            let bq = big_q_policy(g, i, t, x, p)?;
            let bq = symmetrize_blocks(g, bq, n)?;
            let u = u_policy(g, i, t, x, p, q, big_p)?;
            let dwi = g.constant(dw.step(i))?;
            let b = prob.drift(g, t, x, u)?;
            let sigma: Diffusion = prob.diffusion(g, t, x, u)?;
            let hx = prob.hamiltonian_x(g, t, x, u, p, q)?;
            let terms = prob.second_order_terms(g, t, x, u, p, q)?;
            let bdt = g.scale(b, dt)?;
            let sdw = sigma.apply(g, dwi)?;
            let xn = g.add(x, bdt)?;
            let xn = g.add(xn, sdw)?;
            let hdt = g.scale(hx, dt)?;
            let qdw = g.bmm(q, dwi, n, d, 1)?;
            let pn = g.sub(p, hdt)?;
            let pn = g.add(pn, qdw)?;
            let f = second_order_drift(g, dims, terms.b_x, terms.sigma_x, terms.h_xx, big_p, bq)?;
            let fdt = g.scale(f, dt)?;
            let mut bpn = g.sub(big_p, fdt)?;
            for j in 0..d {
                let qj = g.slice_cols(bq, j * n * n, n * n)?;
                let wj = g.slice_cols(dwi, j, 1)?;
                let inc = g.mul(qj, wj)?;
                bpn = g.add(bpn, inc)?;
            }
            let bpn = symmetrize_blocks(g, bpn, n)?;
            Ok([q, bq, u, xn, pn, bpn])
        };
        let [q, bq, u, xn, pn, bpn] = at_step(i, step(g))?;
        paths.qs.push(q);
        paths.big_qs.push(bq);
        paths.us.push(u);
        paths.xs.push(xn);
        paths.ps.push(pn);
        paths.big_ps.push(bpn);
        x = xn;
        p = pn;
        big_p = bpn;
    }
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossVariant {
    First,
    /// Adds `λ·mean(Σᵢ|H_u|²)`; the `T/N` factor is part of `λ`.
    FirstPlusPenalty(f64),
    /// Adds `mean |−h_xx(x̃_T) − P̃_T|²_F`.
    FirstPlusSecond,
}

/// Per-sample `|−h_x(x̃_T) − p̃_T|²`, `B×1`.
pub fn terminal_mismatch(prob: &dyn ControlProblem, g: &mut Graph, paths: &PathBatch) -> Result<Var> {
    let hx = prob.terminal_grad(g, paths.terminal_x())?;
    let r = g.add(hx, paths.terminal_p())?;
    let sq = g.square(r)?;
    g.sum_cols(sq)
}

/// Scalar training loss, `1×1`.
pub fn terminal_loss(
    prob: &dyn ControlProblem,
    g: &mut Graph,
    paths: &PathBatch,
    variant: LossVariant,
) -> Result<Var> {
    let per_sample = terminal_mismatch(prob, g, paths)?;
    let mut loss = g.mean(per_sample)?;
    match variant {
        LossVariant::First => {}
        LossVariant::FirstPlusPenalty(lambda) => {
            let pen = paths
                .penalty
                .ok_or_else(|| Error::invalid("paths carry no penalty accumulator"))?;
            let m = g.mean(pen)?;
            let m = g.scale(m, lambda)?;
            loss = g.add(loss, m)?;
        }
        LossVariant::FirstPlusSecond => {
            let big_pt = *paths
                .big_ps
                .last()
                .ok_or_else(|| Error::invalid("paths carry no second-order adjoint"))?;
            let hxx = prob.terminal_hessian(g, paths.terminal_x())?;
            let r = g.add(hxx, big_pt)?;
            let sq = g.square(r)?;
            let per = g.sum_cols(sq)?;
            let m = g.mean(per)?;
            loss = g.add(loss, m)?;
        }
    }
    Ok(loss)
}

/// Per-sample `Δt·Σᵢ f(tᵢ, x̃ᵢ, ũᵢ) + h(x̃_T)`, `B×1`.
pub fn pathwise_cost(
    prob: &dyn ControlProblem,
    g: &mut Graph,
    grid: &TimeGrid,
    paths: &PathBatch,
) -> Result<Var> {
    if paths.us.len() != grid.steps() {
        return Err(Error::invalid("paths carry no controls"));
    }
    let mut running: Option<Var> = None;
    for (i, &u) in paths.us.iter().enumerate() {
        let f = prob.running_cost(g, grid.t(i), paths.xs[i], u)?;
        running = Some(match running {
            Some(acc) => g.add(acc, f)?,
            None => f,
        });
    }
    let h = prob.terminal_cost(g, paths.terminal_x())?;
    match running {
        Some(r) => {
            let r = g.scale(r, grid.dt())?;
            g.add(r, h)
        }
        None => Ok(h),
    }
}

/// `(1/M)Σⱼ[Δt·Σᵢ f + h(x̃_T)]`, `1×1`.
pub fn cost_functional(
    prob: &dyn ControlProblem,
    g: &mut Graph,
    grid: &TimeGrid,
    paths: &PathBatch,
) -> Result<Var> {
    let c = pathwise_cost(prob, g, grid, paths)?;
    g.mean(c)
}
