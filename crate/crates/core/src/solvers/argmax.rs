//! Per-sample maximization of `H` (or the generalized Hamiltonian) and its
//! differentiable re-entry onto the training graph.

use nalgebra::DMatrix;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::inner_opt::{lbfgs_maximize, OptOptions};
use crate::problems::{hamiltonian_on_graph, row_or_shared, ControlProblem};
use crate::tensor::Tensor;

const HESSIAN_STEP: f64 = 1e-5;

/// `H(t, x, ·, p, q)` at one sample, optionally plus
/// `½tr[(σ(u)−σ̂)ᵀP(σ(u)−σ̂)]`.
struct PointObjective<'a> {
    prob: &'a dyn ControlProblem,
    g: Graph,
    t: f64,
    x: &'a [f64],
    p: &'a [f64],
    q: &'a [f64],
    generalized: Option<(&'a [f64], &'a [f64])>,
}

impl PointObjective<'_> {
    fn eval(&mut self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = &mut self.g;
        g.clear();
        let x = g.constant(Tensor::row(self.x))?;
        let uv = g.parameter(Tensor::row(u))?;
        let p = g.constant(Tensor::row(self.p))?;
        let q = g.constant(Tensor::row(self.q))?;
        let mut h = hamiltonian_on_graph(self.prob, g, self.t, x, uv, p, q)?;
        if let Some((hat, big_p)) = self.generalized {
            let sigma = self.prob.diffusion(g, self.t, x, uv)?;
            let extra = sigma.generalized_term(g, hat, big_p)?;
            h = g.add(h, extra)?;
        }
        let grads = g.backward(h)?;
        Ok((g.value(h).item(), grads.wrt(uv).into_data()))
    }

    /// Central differences of the autodiff gradient, symmetrized.
    fn hessian(&mut self, u: &[f64]) -> Result<DMatrix<f64>> {
        let k = u.len();
        let mut hm = DMatrix::zeros(k, k);
        let mut w = u.to_vec();
        for j in 0..k {
            w[j] = u[j] + HESSIAN_STEP;
            let (_, gp) = self.eval(&w)?;
            w[j] = u[j] - HESSIAN_STEP;
            let (_, gm) = self.eval(&w)?;
            w[j] = u[j];
            for i in 0..k {
                hm[(i, j)] = (gp[i] - gm[i]) / (2.0 * HESSIAN_STEP);
            }
        }
        Ok((&hm + hm.transpose()) * 0.5)
    }
}

/// Numerical maximizers for a batch, with the per-sample `H_uu⁻¹` when
/// requested.
pub(crate) struct BatchArgmax {
    /// `B×k`.
    pub u: Tensor,
    /// `B×(k·k)` inverse Hessians; zero rows where `H_uu` is singular.
    pub inv_hessian: Option<Tensor>,
}

/// Maximizes `H` (or, with `generalized = Some((σ̂, P))`, the generalized
/// Hamiltonian) sample by sample. `warm` holds starting points per sample and
/// is overwritten with the maximizers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn maximize_batch(
    prob: &dyn ControlProblem,
    t: f64,
    x: &Tensor,
    p: &Tensor,
    q: &Tensor,
    generalized: Option<(&Tensor, &Tensor)>,
    warm: &mut [Vec<f64>],
    opts: &OptOptions,
    with_hessian: bool,
) -> Result<BatchArgmax> {
    let k = prob.dims().k;
    let batch = x.rows();
    let mut u = Vec::with_capacity(batch * k);
    let mut inv = Vec::with_capacity(if with_hessian { batch * k * k } else { 0 });
    for (r, start) in warm.iter_mut().enumerate().take(batch) {
        let mut obj = PointObjective {
            prob,
            g: Graph::with_capacity(48),
            t,
            x: row_or_shared(x, r),
            p: row_or_shared(p, r),
            q: row_or_shared(q, r),
            generalized: generalized.map(|(hat, bp)| (row_or_shared(hat, r), row_or_shared(bp, r))),
        };
        let res = lbfgs_maximize(|v| obj.eval(v), start, prob.domain(), opts)?;
        if with_hessian {
            let hm = obj.hessian(&res.u)?;
            match hm.try_inverse().filter(|m| m.iter().all(|v| v.is_finite())) {
                // row-major k×k
                Some(m) => inv.extend(m.transpose().iter().copied()),
                None => inv.extend(std::iter::repeat_n(0.0, k * k)),
            }
        }
        u.extend_from_slice(&res.u);
        start.clone_from(&res.u);
    }
    Ok(BatchArgmax {
        u: Tensor::matrix(batch, k, u)?,
        inv_hessian: if with_hessian {
            Some(Tensor::matrix(batch, k * k, inv)?)
        } else {
            None
        },
    })
}

/// Records `u = u* − H_uu⁻¹·(H_u(t, x, u*, p, q) − r)` with `u*`, `H_uu⁻¹` and
/// the residual `r = H_u(u*)` held constant. The value is exactly `u*` and the
/// derivative is the implicit-function derivative of the maximizer.
///
/// Without a registered `H_u` the maximizer enters as a constant.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attach_argmax(
    prob: &dyn ControlProblem,
    g: &mut Graph,
    t: f64,
    x: Var,
    p: Var,
    q: Var,
    found: BatchArgmax,
) -> Result<Var> {
    let k = prob.dims().k;
    let u_const = g.constant(found.u)?;
    let (Some(inv), true) = (found.inv_hessian, prob.capabilities().hamiltonian_u) else {
        return Ok(u_const);
    };
    let hu = prob.hamiltonian_u(g, t, x, u_const, p, q)?;
    let residual = g.constant(g.value(hu).clone())?;
    let hu = g.sub(hu, residual)?;
    let a = g.constant(inv)?;
    let step = g.bmm(a, hu, k, k, 1)?;
    g.sub(u_const, step)
}
