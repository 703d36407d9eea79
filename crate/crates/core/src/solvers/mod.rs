//! Training loops for the four adjoint-based algorithms and the direct
//! cost-minimizing baseline.
//!
//! Every algorithm shares one [`Solver`]: trainable networks plus the initial
//! adjoints, a per-iteration graph, Adam, and periodic evaluation on a fixed
//! test set. The algorithms differ only in how a batch of paths is rolled out
//! and which loss is minimized.

mod argmax;
mod config;
mod report;

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::{Algorithm, ArgmaxMode, TrainConfig};
pub use report::{aggregate_runs, EvalPoint, OracleValues, RunSummary, SolveReport, Stats};

use crate::autodiff::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::inner_opt::{InitPolicy, OptOptions};
use crate::nn::{AdamState, BoundMlp, Mlp, Mode};
use crate::problems::{ControlProblem, Problem};
use crate::rollout::{
    cost_functional, mix_seed, pathwise_cost, rollout_first_order, rollout_forward, rollout_hbar,
    rollout_second_order, terminal_loss, terminal_mismatch, BrownianBatch, LossVariant, PathBatch,
    TimeGrid,
};
use crate::tensor::Tensor;

/// Seed streams reserved next to the per-iteration batch streams `0, 1, …`.
const TEST_STREAM: u64 = u64::MAX - 1;
const P0_STREAM: u64 = u64::MAX - 2;
const NET_STREAM: u64 = u64::MAX - 16;

/// Rough cap on scalars held per evaluation chunk (`paths × steps × width`).
const EVAL_BUDGET: usize = 8_000_000;

/// An argmax that moved less than this from `û` is treated as `û` itself.
const STATIONARY_TOL: f64 = 1e-10;

/// One network shared by all time points (time is an input) or one per
/// time point.
#[derive(Debug, Clone)]
struct Policy {
    nets: Vec<Mlp>,
}

impl Policy {
    fn new(input: usize, hidden: usize, output: usize, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, cfg.hidden_layers));
        widths.push(output);
        let count = if cfg.per_time_nets { cfg.steps } else { 1 };
        let nets = (0..count)
            .map(|i| Mlp::new(&widths, cfg.batch_norm, mix_seed(seed, i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self { nets })
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundPolicy> {
        Ok(BoundPolicy {
            nets: self.nets.iter().map(|n| n.bind(g, trainable)).collect::<Result<_>>()?,
        })
    }
}

struct BoundPolicy {
    nets: Vec<BoundMlp>,
}

impl BoundPolicy {
    /// `φ(tᵢ, inputs…)` for step `i`.
    fn apply(&mut self, g: &mut Graph, i: usize, t: f64, inputs: &[Var], mode: Mode) -> Result<Var> {
        let idx = if self.nets.len() == 1 { 0 } else { i };
        let rows = g.rows(inputs[0]);
        let mut parts = Vec::with_capacity(inputs.len() + 1);
        parts.push(g.constant(Tensor::full(&[rows, 1], t))?);
        parts.extend_from_slice(inputs);
        let z = g.concat(&parts)?;
        self.nets[idx].forward(g, z, mode)
    }
}

struct Bound {
    policies: Vec<BoundPolicy>,
    p0: Option<Var>,
    big_p0_leaf: Option<Var>,
    /// Full symmetric `1×(n·n)` view of the upper triangle.
    big_p0: Option<Var>,
}

/// Per-sample maximizers from the previous visit, `[step][sample]`.
struct Warm<'a> {
    buf: &'a mut Vec<Vec<Vec<f64>>>,
    offset: usize,
    k: usize,
}

impl Warm<'_> {
    fn at(&mut self, i: usize, len: usize) -> &mut [Vec<f64>] {
        if self.buf.len() <= i {
            self.buf.resize_with(i + 1, Vec::new);
        }
        let row = &mut self.buf[i];
        if row.len() < self.offset + len {
            row.resize(self.offset + len, vec![0.0; self.k]);
        }
        &mut row[self.offset..self.offset + len]
    }
}

struct Forward {
    loss: Var,
    /// Mean terminal mismatch; absent for the direct baseline.
    terminal: Option<Var>,
    paths: PathBatch,
}

fn upper_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of `(i, j)`, `i ≤ j`, in the row-major upper triangle.
fn upper_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * i.saturating_sub(1) / 2 + (j - i)
}

fn upper_to_full(n: usize) -> Vec<usize> {
    (0..n * n).map(|c| upper_index(n, c / n, c % n)).collect()
}

/// Largest `‖A − Aᵀ‖_F` over the rows of a `B×(n·n)` tensor.
fn max_asymmetry(t: &Tensor, n: usize) -> f64 {
    (0..t.rows())
        .map(|r| {
            let a = t.row_slice(r);
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += (a[i * n + j] - a[j * n + i]).powi(2);
                }
            }
            s.sqrt()
        })
        .fold(0.0, f64::max)
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::Diverged { step, what } => Error::TrainingDiverged {
            iteration,
            reason: format!("non-finite {what} at time step {step}"),
        },
        Error::NonFinite(what) => Error::TrainingDiverged {
            iteration,
            reason: format!("non-finite {what}"),
        },
        other => other,
    }
}

/// Trainable state and training loop for one algorithm on one problem.
pub struct Solver {
    alg: Algorithm,
    prob: Problem,
    cfg: TrainConfig,
    seed: u64,
    grid: TimeGrid,
    policies: Vec<Policy>,
    /// Empty for the direct baseline.
    p0: Vec<f64>,
    /// Upper triangle of `P̃₀`; empty unless second order.
    big_p0: Vec<f64>,
    adam: AdamState,
    explicit: bool,
    warm_train: Vec<Vec<Vec<f64>>>,
    warm_test: Vec<Vec<Vec<f64>>>,
    max_p_asymmetry: f64,
}

impl Solver {
    pub fn new(alg: Algorithm, prob: Problem, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let caps = prob.capabilities();
        let dims = prob.dims();
        let (n, d, k) = (dims.n, dims.d, dims.k);
        match alg {
            Algorithm::Alg2 if prob.name() == "gexp" || !caps.hamiltonian_u => {
                return Err(Error::Unsupported(format!(
                    "algorithm 2 penalizes H_u, but the `{}` Hamiltonian is linear in the control \
                     (H_θ does not depend on θ), so the penalty cannot select a maximizer; \
                     use algorithm 1 or 3",
                    prob.name()
                )));
            }
            Algorithm::Alg3 if !caps.hbar => return Err(prob.missing("H̄ and its derivatives")),
            Algorithm::Alg4 if !caps.second_order => {
                return Err(prob.missing("second-order derivatives"));
            }
            _ => {}
        }
        let grid = TimeGrid::new(prob.horizon(), cfg.steps)?;
        let net_seed = |i: u64| mix_seed(seed, NET_STREAM - i);
        let policies = match alg {
            Algorithm::Alg1 | Algorithm::Alg3 => {
                vec![Policy::new(1 + 2 * n, 10 + 2 * n, n * d, &cfg, net_seed(0))?]
            }
            Algorithm::Alg2 => vec![
                Policy::new(n + 1, n + 10, n * d, &cfg, net_seed(0))?,
                Policy::new(n + 1, n + 10, k, &cfg, net_seed(1))?,
            ],
            Algorithm::Alg4 => vec![
                Policy::new(n + 1, n + 10, n * d, &cfg, net_seed(0))?,
                Policy::new(n + 1, n + 10, d * n * n, &cfg, net_seed(1))?,
            ],
            Algorithm::Direct => vec![Policy::new(n + 1, n + 10, k, &cfg, net_seed(0))?],
        };

        let mut g = Graph::new();
        let x0 = g.constant(Tensor::row(prob.x0()))?;
        let p0 = match alg {
            Algorithm::Direct => Vec::new(),
            _ if cfg.random_p0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, P0_STREAM));
                (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
            _ => {
                let hx = prob.terminal_grad(&mut g, x0)?;
                g.value(hx).data().iter().map(|v| -v).collect()
            }
        };
        let big_p0 = if alg == Algorithm::Alg4 {
            let hxx = prob.terminal_hessian(&mut g, x0)?;
            let full = g.value(hxx).row_slice(0).to_vec();
            let mut tri = Vec::with_capacity(upper_len(n));
            for i in 0..n {
                for j in i..n {
                    tri.push(-full[i * n + j]);
                }
            }
            tri
        } else {
            Vec::new()
        };

        let mut blocks: Vec<usize> = policies
            .iter()
            .flat_map(|p| p.nets.iter())
            .flat_map(|m| m.params().into_iter().map(Tensor::len))
            .collect();
        blocks.extend([p0.len(), big_p0.len()].into_iter().filter(|&l| l > 0));

        let explicit = caps.explicit_argmax && cfg.argmax == ArgmaxMode::Auto;
        Ok(Self {
            alg,
            prob,
            seed,
            grid,
            policies,
            p0,
            big_p0,
            adam: AdamState::new(&blocks),
            explicit,
            warm_train: Vec::new(),
            warm_test: Vec::new(),
            max_p_asymmetry: 0.0,
            cfg,
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.alg
    }

    pub fn problem(&self) -> &dyn ControlProblem {
        self.prob.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    /// Full row-major `P̃₀`, second-order runs only.
    pub fn big_p0(&self) -> Option<Vec<f64>> {
        if self.big_p0.is_empty() {
            return None;
        }
        let n = self.prob.dims().n;
        Some(upper_to_full(n).into_iter().map(|i| self.big_p0[i]).collect())
    }

    /// Whether the control comes from a registered closed form rather than
    /// the inner optimizer.
    pub fn uses_explicit_argmax(&self) -> bool {
        self.explicit
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .policies
            .iter_mut()
            .flat_map(|p| p.nets.iter_mut())
            .flat_map(|m| m.params_mut().into_iter().map(Tensor::data_mut))
            .collect();
        if !self.p0.is_empty() {
            out.push(&mut self.p0);
        }
        if !self.big_p0.is_empty() {
            out.push(&mut self.big_p0);
        }
        out
    }

    /// All trainables in Adam block order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .policies
            .iter()
            .flat_map(|p| p.nets.iter())
            .flat_map(Mlp::flat_params)
            .collect();
        out.extend_from_slice(&self.p0);
        out.extend_from_slice(&self.big_p0);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut slices = self.param_slices_mut();
        let total: usize = slices.iter().map(|s| s.len()).sum();
        if total != flat.len() {
            return Err(Error::invalid(format!(
                "expected {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for s in &mut slices {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let policies = self
            .policies
            .iter()
            .map(|p| p.bind(g, trainable))
            .collect::<Result<_>>()?;
        let p0 = if self.p0.is_empty() {
            None
        } else {
            Some(g.leaf(Tensor::row(&self.p0), trainable)?)
        };
        let (big_p0_leaf, big_p0) = if self.big_p0.is_empty() {
            (None, None)
        } else {
            let leaf = g.leaf(Tensor::row(&self.big_p0), trainable)?;
            let full = g.gather_cols(leaf, &upper_to_full(self.prob.dims().n))?;
            (Some(leaf), Some(full))
        };
        Ok(Bound {
            policies,
            p0,
            big_p0_leaf,
            big_p0,
        })
    }

    fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = bound
            .policies
            .iter()
            .flat_map(|p| p.nets.iter())
            .flat_map(|b| b.params().iter().map(|&v| grads.wrt(v).into_data()))
            .collect();
        out.extend(
            [bound.p0, bound.big_p0_leaf]
                .into_iter()
                .flatten()
                .map(|v| grads.wrt(v).into_data()),
        );
        out
    }

    /// The control at step `i` from the maximum condition: closed form, or
    /// per-sample maximization re-entered on the graph.
    #[allow(clippy::too_many_arguments)]
    fn control(
        &self,
        g: &mut Graph,
        i: usize,
        t: f64,
        x: Var,
        p: Var,
        q: Var,
        warm: &mut Warm,
        with_grad: bool,
    ) -> Result<Var> {
        let prob = self.prob.as_ref();
        if self.explicit {
            return prob.explicit_argmax(g, t, x, p, q);
        }
        let batch = g.rows(x);
        let found = argmax::maximize_batch(
            prob,
            t,
            g.value(x),
            g.value(p),
            g.value(q),
            None,
            warm.at(i, batch),
            &self.cfg.inner,
            with_grad,
        )?;
        argmax::attach_argmax(prob, g, t, x, p, q, found)
    }

    /// Maximizer of the generalized Hamiltonian
    /// `H(u) + ½tr[(σ(u)−σ(û))ᵀP(σ(u)−σ(û))]`, searched from `û = argmax H`.
    #[allow(clippy::too_many_arguments)]
    fn generalized_control(
        &self,
        g: &mut Graph,
        i: usize,
        t: f64,
        x: Var,
        p: Var,
        q: Var,
        big_p: Var,
        warm: &mut Warm,
        with_grad: bool,
    ) -> Result<Var> {
        let prob = self.prob.as_ref();
        let hat = self.control(g, i, t, x, p, q, warm, with_grad)?;
        let sigma = prob.diffusion(g, t, x, hat)?;
        let batch = g.rows(x);
        let hat_sigma = Tensor::from_rows(&(0..batch).map(|r| sigma.dense_row(g, r)).collect::<Vec<_>>())?;
        let hat_u = g.value(hat).clone();
        let mut start: Vec<Vec<f64>> = (0..batch).map(|r| hat_u.row_slice(r).to_vec()).collect();
        let opts = OptOptions {
            init: InitPolicy::WarmStart,
            ..self.cfg.inner
        };
        let big_pv = g.value(big_p).clone();
        let (xv, pv, qv) = (g.value(x), g.value(p), g.value(q));
        let found = argmax::maximize_batch(
            prob,
            t,
            xv,
            pv,
            qv,
            Some((&hat_sigma, &big_pv)),
            &mut start,
            &opts,
            false,
        )?;
        let moved = found
            .u
            .data()
            .iter()
            .zip(hat_u.data())
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max);
        if moved <= STATIONARY_TOL {
            return Ok(hat);
        }
        let found = if with_grad {
            argmax::maximize_batch(
                prob,
                t,
                xv,
                pv,
                qv,
                Some((&hat_sigma, &big_pv)),
                &mut start,
                &opts,
                true,
            )?
        } else {
            found
        };
        argmax::attach_argmax(prob, g, t, x, p, q, found)
    }

    fn forward(
        &self,
        g: &mut Graph,
        bound: &mut Bound,
        dw: &BrownianBatch,
        mode: Mode,
        mut warm: Warm,
        with_grad: bool,
    ) -> Result<Forward> {
        let prob = self.prob.as_ref();
        let grid = &self.grid;
        let x0 = g.constant(Tensor::row(prob.x0()))?;
        let p0 = bound.p0;
        let terminal = |g: &mut Graph, paths: &PathBatch| -> Result<Var> {
            let m = terminal_mismatch(prob, g, paths)?;
            g.mean(m)
        };
        match self.alg {
            Algorithm::Alg1 => {
                let qp = &mut bound.policies[0];
                let paths = rollout_first_order(
                    prob,
                    g,
                    grid,
                    dw,
                    x0,
                    p0.expect("adjoint start"),
                    |g, i, t, x, p| qp.apply(g, i, t, &[x, p], mode),
                    |g, i, t, x, p, q| self.control(g, i, t, x, p, q, &mut warm, with_grad),
                    false,
                )?;
                let loss = terminal(g, &paths)?;
                Ok(Forward {
                    loss,
                    terminal: Some(loss),
                    paths,
                })
            }
            Algorithm::Alg2 => {
                let (qp, rest) = bound.policies.split_first_mut().expect("two policies");
                let up = &mut rest[0];
                let paths = rollout_first_order(
                    prob,
                    g,
                    grid,
                    dw,
                    x0,
                    p0.expect("adjoint start"),
                    |g, i, t, x, _p| qp.apply(g, i, t, &[x], mode),
                    |g, i, t, x, _p, _q| up.apply(g, i, t, &[x], mode),
                    true,
                )?;
                let loss = terminal_loss(prob, g, &paths, LossVariant::FirstPlusPenalty(self.cfg.lambda))?;
                Ok(Forward {
                    loss,
                    terminal: Some(terminal(g, &paths)?),
                    paths,
                })
            }
            Algorithm::Alg3 => {
                let qp = &mut bound.policies[0];
                let paths = rollout_hbar(
                    prob,
                    g,
                    grid,
                    dw,
                    x0,
                    p0.expect("adjoint start"),
                    |g, i, t, x, p| qp.apply(g, i, t, &[x, p], mode),
                )?;
                let loss = terminal(g, &paths)?;
                Ok(Forward {
                    loss,
                    terminal: Some(loss),
                    paths,
                })
            }
            Algorithm::Alg4 => {
                let (qp, rest) = bound.policies.split_first_mut().expect("two policies");
                let bqp = &mut rest[0];
                let paths = rollout_second_order(
                    prob,
                    g,
                    grid,
                    dw,
                    x0,
                    p0.expect("adjoint start"),
                    bound.big_p0.expect("second-order start"),
                    |g, i, t, x, _p| qp.apply(g, i, t, &[x], mode),
                    |g, i, t, x, _p| bqp.apply(g, i, t, &[x], mode),
                    |g, i, t, x, p, q, bp| {
                        self.generalized_control(g, i, t, x, p, q, bp, &mut warm, with_grad)
                    },
                )?;
                let loss = terminal_loss(prob, g, &paths, LossVariant::FirstPlusSecond)?;
                Ok(Forward {
                    loss,
                    terminal: Some(terminal(g, &paths)?),
                    paths,
                })
            }
            Algorithm::Direct => {
                let up = &mut bound.policies[0];
                let paths = rollout_forward(prob, g, grid, dw, x0, |g, i, t, x| {
                    up.apply(g, i, t, &[x], mode)
                })?;
                let loss = cost_functional(prob, g, grid, &paths)?;
                Ok(Forward {
                    loss,
                    terminal: None,
                    paths,
                })
            }
        }
    }

    /// Batch objective and its gradient with respect to
    /// [`Solver::flat_params`], without updating anything.
    pub fn loss_and_gradient(&mut self, dw: &BrownianBatch) -> Result<(f64, Vec<f64>)> {
        let (loss, grads, _) = self.batch_gradients(dw, false)?;
        Ok((loss, grads.concat()))
    }

    fn batch_gradients(
        &mut self,
        dw: &BrownianBatch,
        track: bool,
    ) -> Result<(f64, Vec<Vec<f64>>, Bound)> {
        let mut g = Graph::with_capacity(64 * self.cfg.steps);
        let mut bound = self.bind(&mut g, true)?;
        let mut buf = std::mem::take(&mut self.warm_train);
        let warm = Warm {
            buf: &mut buf,
            offset: 0,
            k: self.prob.dims().k,
        };
        let res = self.forward(&mut g, &mut bound, dw, Mode::Train, warm, true);
        self.warm_train = buf;
        let fwd = res?;
        if track && self.alg == Algorithm::Alg4 {
            let n = self.prob.dims().n;
            for &bp in &fwd.paths.big_ps {
                self.max_p_asymmetry = self.max_p_asymmetry.max(max_asymmetry(g.value(bp), n));
            }
        }
        let loss = g.value(fwd.loss).item();
        let grads = g.backward(fwd.loss)?;
        Ok((loss, self.gradients(&bound, &grads), bound))
    }

    /// One Adam update on batch `l`; returns the batch objective before the
    /// update.
    pub fn step(&mut self, l: usize) -> Result<f64> {
        let dims = self.prob.dims();
        let dw = BrownianBatch::sample(&self.grid, self.cfg.batch, dims.d, mix_seed(self.seed, l as u64), 0);
        let (loss, grads, bound) = self.batch_gradients(&dw, true).map_err(|e| diverged(l, e))?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: l,
                reason: format!("loss is {loss}"),
            });
        }
        for (pol, bp) in self.policies.iter_mut().zip(&bound.policies) {
            for (net, bn) in pol.nets.iter_mut().zip(&bp.nets) {
                net.commit_stats(bn);
            }
        }
        let lr = self.cfg.learning_rate_at(l);
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut adam = std::mem::replace(&mut self.adam, AdamState::new(&[]));
        let res = {
            let mut params = self.param_slices_mut();
            adam.step(&mut params, &grad_refs, lr)
        };
        self.adam = adam;
        res.map_err(|e| diverged(l, e))?;
        Ok(loss)
    }

    /// Recovers `ũᵢ = argmax H(tᵢ, x̃ᵢ, ·, p̃ᵢ, q̃ᵢ)` along control-free paths.
    fn recover_controls(&self, g: &mut Graph, paths: &mut PathBatch, warm: &mut Warm) -> Result<()> {
        for i in 0..self.grid.steps() {
            let (x, p, q) = (paths.xs[i], paths.ps[i], paths.qs[i]);
            let u = self.control(g, i, self.grid.t(i), x, p, q, warm, false)?;
            paths.us.push(u);
        }
        Ok(())
    }

    /// Test-set statistics at the current parameters.
    pub fn evaluate(&mut self, iteration: usize) -> Result<EvalPoint> {
        let dims = self.prob.dims();
        let per_path = self.grid.steps() * (dims.n * dims.d + dims.n + dims.k + 1).max(1);
        let chunk = (EVAL_BUDGET / per_path).clamp(16, 512);
        let total = self.cfg.test_paths;
        let test_seed = mix_seed(self.seed, TEST_STREAM);
        let with_hu = self.prob.capabilities().hamiltonian_u && self.alg != Algorithm::Direct;
        let (mut loss, mut terminal, mut cost, mut hu_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut buf = std::mem::take(&mut self.warm_test);
        let mut start = 0;
        let res = (|| -> Result<()> {
            while start < total {
                let len = chunk.min(total - start);
                let dw = BrownianBatch::sample(&self.grid, len, dims.d, test_seed, start as u64);
                let mut g = Graph::new();
                let mut bound = self.bind(&mut g, false)?;
                let mut warm = Warm {
                    buf: &mut buf,
                    offset: start,
                    k: dims.k,
                };
                let fwd = self.forward(&mut g, &mut bound, &dw, Mode::Eval, warm.reborrow(), false)?;
                let mut paths = fwd.paths;
                if self.alg == Algorithm::Alg3 {
                    self.recover_controls(&mut g, &mut paths, &mut warm)?;
                }
                let c = pathwise_cost(self.prob.as_ref(), &mut g, &self.grid, &paths)?;
                let w = len as f64;
                cost += g.value(c).data().iter().sum::<f64>();
                loss += g.value(fwd.loss).item() * w;
                if let Some(t) = fwd.terminal {
                    terminal += g.value(t).item() * w;
                }
                if with_hu {
                    for i in 0..self.grid.steps() {
                        let hu = self.prob.hamiltonian_u(
                            &mut g,
                            self.grid.t(i),
                            paths.xs[i],
                            paths.us[i],
                            paths.ps[i],
                            paths.qs[i],
                        )?;
                        let v = g.value(hu);
                        hu_sum += (0..v.rows())
                            .map(|r| v.row_slice(r).iter().map(|a| a * a).sum::<f64>().sqrt())
                            .sum::<f64>();
                    }
                }
                start += len;
            }
            Ok(())
        })();
        self.warm_test = buf;
        res.map_err(|e| diverged(iteration, e))?;
        let m = total as f64;
        let p0 = if self.p0.is_empty() {
            Stats::of(&[])
        } else {
            Stats::of(&self.p0)
        };
        Ok(EvalPoint {
            iteration,
            loss: loss / m,
            terminal_loss: if self.alg == Algorithm::Direct {
                f64::NAN
            } else {
                terminal / m
            },
            cost: self.prob.display_sign() * cost / m,
            p0_mean: p0.mean,
            p0_min: p0.min,
            p0_max: p0.max,
            wall_ms: 0,
            mean_abs_hu: with_hu.then(|| hu_sum / (m * self.grid.steps() as f64)),
        })
    }

    /// Runs the configured iteration budget, evaluating at iteration 0, every
    /// `eval_interval` iterations and at the end. `observer` sees each
    /// evaluation as it is produced.
    pub fn train(&mut self, observer: &mut dyn FnMut(&EvalPoint)) -> Result<SolveReport> {
        let started = Instant::now();
        let mut train_seconds = 0.0;
        let iterations = self.cfg.iterations;
        let mut curve = Vec::new();
        let mut train_losses = Vec::with_capacity(iterations);
        for l in 0..=iterations {
            if l % self.cfg.eval_interval == 0 || l == iterations {
                let mut point = self.evaluate(l)?;
                point.wall_ms = started.elapsed().as_millis() as u64;
                observer(&point);
                curve.push(point);
            }
            if l == iterations {
                break;
            }
            let t = Instant::now();
            train_losses.push(self.step(l)?);
            train_seconds += t.elapsed().as_secs_f64();
        }
        let last: &EvalPoint = curve.last().expect("final evaluation");
        if !last.loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: iterations,
                reason: format!("test loss is {}", last.loss),
            });
        }
        Ok(SolveReport {
            algorithm: self.alg,
            problem: self.prob.name().to_string(),
            n: self.prob.dims().n,
            seed: self.seed,
            iterations,
            p0: self.p0.clone(),
            big_p0: self.big_p0(),
            final_loss: last.loss,
            final_cost: last.cost,
            curve,
            train_losses,
            wall_seconds: started.elapsed().as_secs_f64(),
            train_seconds,
            max_p_asymmetry: (self.alg == Algorithm::Alg4).then_some(self.max_p_asymmetry),
        })
    }

    /// Writes every trainable as text: a header, `p0`/`big_p0` lines, then
    /// each network's own checkpoint prefixed by `net <policy> <index> <lines>`.
    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "smpcontrol-solver 1")?;
        writeln!(w, "algorithm {}", self.alg)?;
        writeln!(w, "problem {} {}", self.prob.name(), self.prob.dims().n)?;
        let vals = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        writeln!(w, "p0 {} {}", self.p0.len(), vals(&self.p0))?;
        writeln!(w, "big_p0 {} {}", self.big_p0.len(), vals(&self.big_p0))?;
        for (pi, pol) in self.policies.iter().enumerate() {
            for (ni, net) in pol.nets.iter().enumerate() {
                let mut buf = Vec::new();
                net.save(&mut buf)?;
                let lines = buf.iter().filter(|&&b| b == b'\n').count();
                writeln!(w, "net {pi} {ni} {lines}")?;
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    /// Restores trainables written by [`Solver::save_checkpoint`] into a
    /// solver built with the same algorithm, problem and configuration.
    pub fn load_checkpoint<R: BufRead>(&mut self, r: R) -> Result<()> {
        let bad = |m: String| Error::Config(format!("checkpoint: {m}"));
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(Error::from)
        };
        if next()? != "smpcontrol-solver 1" {
            return Err(bad("unknown header".into()));
        }
        let expect = [
            format!("algorithm {}", self.alg),
            format!("problem {} {}", self.prob.name(), self.prob.dims().n),
        ];
        for e in expect {
            let got = next()?;
            if got != e {
                return Err(bad(format!("expected `{e}`, found `{got}`")));
            }
        }
        let read_vec = |key: &str, len: usize, line: String| -> Result<Vec<f64>> {
            let mut it = line.split_whitespace();
            if it.next() != Some(key) || it.next().and_then(|s| s.parse().ok()) != Some(len) {
                return Err(bad(format!("expected `{key} {len}`")));
            }
            let v = it
                .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != len {
                return Err(bad(format!("{key} has {} values, expected {len}", v.len())));
            }
            Ok(v)
        };
        let p0 = read_vec("p0", self.p0.len(), next()?)?;
        let big_p0 = read_vec("big_p0", self.big_p0.len(), next()?)?;
        let mut nets = Vec::new();
        for (pi, pol) in self.policies.iter().enumerate() {
            for ni in 0..pol.nets.len() {
                let head = next()?;
                let parts: Vec<&str> = head.split_whitespace().collect();
                let count: usize = match parts.as_slice() {
                    ["net", a, b, c] if *a == pi.to_string() && *b == ni.to_string() => {
                        c.parse().map_err(|_| bad(format!("bad line count in `{head}`")))?
                    }
                    _ => return Err(bad(format!("expected net {pi} {ni}, found `{head}`"))),
                };
                let mut text = String::new();
                for _ in 0..count {
                    text.push_str(&next()?);
                    text.push('\n');
                }
                let net = Mlp::load(text.as_bytes())?;
                if net.widths() != pol.nets[ni].widths() || net.batch_norm() != pol.nets[ni].batch_norm() {
                    return Err(bad(format!("net {pi} {ni} has a different architecture")));
                }
                nets.push(net);
            }
        }
        let mut it = nets.into_iter();
        for pol in &mut self.policies {
            for slot in &mut pol.nets {
                *slot = it.next().expect("counted above");
            }
        }
        self.p0 = p0;
        self.big_p0 = big_p0;
        Ok(())
    }
}

impl Warm<'_> {
    fn reborrow(&mut self) -> Warm<'_> {
        Warm {
            buf: self.buf,
            offset: self.offset,
            k: self.k,
        }
    }
}

/// Trains `alg` on `prob` from `seed` with no observer.
pub fn solve(alg: Algorithm, prob: Problem, cfg: &TrainConfig, seed: u64) -> Result<SolveReport> {
    Solver::new(alg, prob, cfg.clone(), seed)?.train(&mut |_| {})
}

pub fn solve_alg1(prob: Problem, cfg: &TrainConfig, seed: u64) -> Result<SolveReport> {
    solve(Algorithm::Alg1, prob, cfg, seed)
}

pub fn solve_alg2(prob: Problem, cfg: &TrainConfig, seed: u64) -> Result<SolveReport> {
    solve(Algorithm::Alg2, prob, cfg, seed)
}

pub fn solve_alg3(prob: Problem, cfg: &TrainConfig, seed: u64) -> Result<SolveReport> {
    solve(Algorithm::Alg3, prob, cfg, seed)
}

pub fn solve_alg4(prob: Problem, cfg: &TrainConfig, seed: u64) -> Result<SolveReport> {
    solve(Algorithm::Alg4, prob, cfg, seed)
}

pub fn solve_direct(prob: Problem, cfg: &TrainConfig, seed: u64) -> Result<SolveReport> {
    solve(Algorithm::Direct, prob, cfg, seed)
}
