//! Control problems: dynamics, costs and Hamiltonian closed forms recorded on
//! a [`Graph`], plus the built-in benchmark problems.
//!
//! Batched conventions: `x`, `p` are `B×n`, `u` is `B×k`, `q` is `B×(n·d)` with
//! each row a row-major `n×d` matrix, Brownian increments are `B×d`. Constant
//! coefficients may be returned with a single row and rely on broadcasting.

mod gexp;
mod lq;
mod nonlinear;
mod transcendental;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use gexp::GExpectation;
pub use lq::{LinearQuadratic, Terminal};
pub use nonlinear::Nonlinear;
pub use transcendental::Transcendental;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// State dimension.
    pub n: usize,
    /// Brownian dimension.
    pub d: usize,
    /// Control dimension.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Free,
    /// Per-coordinate bounds, `lo ≤ hi`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

/// Optional callbacks a problem registers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capabilities {
    pub explicit_argmax: bool,
    pub hamiltonian_u: bool,
    pub hbar: bool,
    pub second_order: bool,
}

/// A diffusion coefficient recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub enum Diffusion {
    /// `B×(n·d)` (or `1×(n·d)`), row-major `n×d` per row.
    Dense { sigma: Var, n: usize, d: usize },
    /// `B×n` (or `1×n`) diagonal of an `n×n` matrix; requires `d = n`.
    Diagonal { diag: Var },
}

impl Diffusion {
    /// `σ·ΔW`, `B×n`.
    pub fn apply(&self, g: &mut Graph, dw: Var) -> Result<Var> {
        match *self {
            Diffusion::Dense { sigma, n, d } => g.bmm(sigma, dw, n, d, 1),
            Diffusion::Diagonal { diag } => g.mul(diag, dw),
        }
    }

    /// `tr(qᵀσ)` per row, `B×1`.
    pub fn trace_with(&self, g: &mut Graph, q: Var) -> Result<Var> {
        match *self {
            Diffusion::Dense { sigma, .. } => {
                let prod = g.mul(q, sigma)?;
                g.sum_cols(prod)
            }
            Diffusion::Diagonal { diag } => {
                let n = g.cols(diag);
                let q_diag = g.gather_cols(q, &diagonal_indices(n))?;
                let prod = g.mul(q_diag, diag)?;
                g.sum_cols(prod)
            }
        }
    }

    /// `½tr[(σ−σ̂)ᵀP(σ−σ̂)]` per row, `B×1`. `hat` is a dense row-major `n×d`
    /// matrix and `big_p` a row-major `n×n` matrix, both shared by all rows.
    pub fn generalized_term(&self, g: &mut Graph, hat: &[f64], big_p: &[f64]) -> Result<Var> {
        let half = match *self {
            Diffusion::Dense { sigma, n, d } => {
                let h = g.constant(Tensor::row(hat))?;
                let delta = g.sub(sigma, h)?;
                let pm = g.constant(Tensor::row(big_p))?;
                let pd = g.bmm(pm, delta, n, n, d)?;
                let m = g.mul(delta, pd)?;
                g.sum_cols(m)?
            }
            Diffusion::Diagonal { diag } => {
                let n = g.cols(diag);
                let idx = diagonal_indices(n);
                let hd: Vec<f64> = idx.iter().map(|&i| hat[i]).collect();
                let pd: Vec<f64> = idx.iter().map(|&i| big_p[i]).collect();
                let h = g.constant(Tensor::row(&hd))?;
                let delta = g.sub(diag, h)?;
                let sq = g.square(delta)?;
                let pv = g.constant(Tensor::row(&pd))?;
                let m = g.mul(sq, pv)?;
                g.sum_cols(m)?
            }
        };
        g.scale(half, 0.5)
    }

    /// Dense row-major `n×d` values of row `r` (shared rows are broadcast).
    pub fn dense_row(&self, g: &Graph, r: usize) -> Vec<f64> {
        match *self {
            Diffusion::Dense { sigma, .. } => row_or_shared(g.value(sigma), r).to_vec(),
            Diffusion::Diagonal { diag } => {
                let v = row_or_shared(g.value(diag), r);
                let n = v.len();
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    out[i * n + i] = v[i];
                }
                out
            }
        }
    }
}

/// Column indices of the diagonal of a row-major `n×n` block.
pub fn diagonal_indices(n: usize) -> Vec<usize> {
    (0..n).map(|i| i * n + i).collect()
}

pub(crate) fn row_or_shared(t: &Tensor, r: usize) -> &[f64] {
    if t.rows() == 1 {
        t.row_slice(0)
    } else {
        t.row_slice(r)
    }
}

/// Derivatives needed by the second-order adjoint equation.
#[derive(Debug, Clone)]
pub struct SecondOrderTerms {
    /// `b_x`, `B×(n·n)` or shared `1×(n·n)`.
    pub b_x: Var,
    /// `σ_x^j` for `j < d`, stacked as `B×(d·n·n)` or shared `1×(d·n·n)`.
    pub sigma_x: Var,
    /// `H_xx`, `B×(n·n)` or shared.
    pub h_xx: Var,
}

/// A stochastic control problem
/// `dx = b(t,x,u)dt + σ(t,x,u)dW`, minimizing `E[∫f dt + h(x_T)]`.
///
/// Required callbacks cover the state equation, the costs, `h_x` and `H_x`;
/// the rest are optional and advertised by [`ControlProblem::capabilities`].
pub trait ControlProblem: Send + Sync {
    fn name(&self) -> &str;
    fn dims(&self) -> Dims;
    fn x0(&self) -> &[f64];
    fn horizon(&self) -> f64;
    fn domain(&self) -> &Domain;

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    /// Multiplier turning the minimized cost into the reported value.
    fn display_sign(&self) -> f64 {
        1.0
    }

    fn drift(&self, g: &mut Graph, t: f64, x: Var, u: Var) -> Result<Var>;
    fn diffusion(&self, g: &mut Graph, t: f64, x: Var, u: Var) -> Result<Diffusion>;
    /// `B×1`.
    fn running_cost(&self, g: &mut Graph, t: f64, x: Var, u: Var) -> Result<Var>;
    /// `B×1`.
    fn terminal_cost(&self, g: &mut Graph, x: Var) -> Result<Var>;
    /// `h_x`, `B×n`.
    fn terminal_grad(&self, g: &mut Graph, x: Var) -> Result<Var>;

    /// `H_x`, `B×n`.
    fn hamiltonian_x(&self, g: &mut Graph, t: f64, x: Var, u: Var, p: Var, q: Var)
        -> Result<Var>;

    /// `h_xx`, `B×(n·n)` or shared.
    fn terminal_hessian(&self, _g: &mut Graph, _x: Var) -> Result<Var> {
        Err(self.missing("h_xx"))
    }

    /// `H_u`, `B×k`.
    fn hamiltonian_u(
        &self,
        _g: &mut Graph,
        _t: f64,
        _x: Var,
        _u: Var,
        _p: Var,
        _q: Var,
    ) -> Result<Var> {
        Err(self.missing("H_u"))
    }

    /// Maximizer of `H` over the domain, `B×k`.
    fn explicit_argmax(&self, _g: &mut Graph, _t: f64, _x: Var, _p: Var, _q: Var) -> Result<Var> {
        Err(self.missing("an explicit argmax"))
    }

    /// `H̄(t,x,p,q) = max_u H`, `B×1`.
    fn hbar(&self, _g: &mut Graph, _t: f64, _x: Var, _p: Var, _q: Var) -> Result<Var> {
        Err(self.missing("H̄"))
    }

    fn hbar_x(&self, _g: &mut Graph, _t: f64, _x: Var, _p: Var, _q: Var) -> Result<Var> {
        Err(self.missing("H̄_x"))
    }

    fn hbar_p(&self, _g: &mut Graph, _t: f64, _x: Var, _p: Var, _q: Var) -> Result<Var> {
        Err(self.missing("H̄_p"))
    }

    fn hbar_q(&self, _g: &mut Graph, _t: f64, _x: Var, _p: Var, _q: Var) -> Result<Diffusion> {
        Err(self.missing("H̄_q"))
    }

    fn second_order_terms(
        &self,
        _g: &mut Graph,
        _t: f64,
        _x: Var,
        _u: Var,
        _p: Var,
        _q: Var,
    ) -> Result<SecondOrderTerms> {
        Err(self.missing("second-order derivatives"))
    }

    fn missing(&self, what: &'static str) -> Error {
        Error::Missing {
            problem: self.name().to_string(),
            what,
        }
    }
}

pub type Problem = Arc<dyn ControlProblem>;

/// `H = ⟨p,b⟩ + tr(qᵀσ) − f` on the graph, `B×1`.
pub fn hamiltonian_on_graph(
    prob: &dyn ControlProblem,
    g: &mut Graph,
    t: f64,
    x: Var,
    u: Var,
    p: Var,
    q: Var,
) -> Result<Var> {
    let b = prob.drift(g, t, x, u)?;
    let pb = g.mul(p, b)?;
    let pb = g.sum_cols(pb)?;
    let sigma = prob.diffusion(g, t, x, u)?;
    let tr = sigma.trace_with(g, q)?;
    let f = prob.running_cost(g, t, x, u)?;
    let s = g.add(pb, tr)?;
    g.sub(s, f)
}

/// Value and first derivatives of `H` at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_u: Vec<f64>,
}

/// Evaluates `H` at one point; gradients come from reverse-mode autodiff over
/// the problem's callbacks.
pub fn hamiltonian(
    prob: &dyn ControlProblem,
    t: f64,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
) -> Result<HamiltonianEval> {
    let Dims { n, d, k } = prob.dims();
    check_len("x", x, n)?;
    check_len("u", u, k)?;
    check_len("p", p, n)?;
    check_len("q", q, n * d)?;
    let mut g = Graph::with_capacity(32);
    let xv = g.parameter(Tensor::row(x))?;
    let uv = g.parameter(Tensor::row(u))?;
    let pv = g.constant(Tensor::row(p))?;
    let qv = g.constant(Tensor::row(q))?;
    let h = hamiltonian_on_graph(prob, &mut g, t, xv, uv, pv, qv)?;
    let grads = g.backward(h)?;
    Ok(HamiltonianEval {
        value: g.value(h).item(),
        grad_x: grads.wrt(xv).into_data(),
        grad_u: grads.wrt(uv).into_data(),
    })
}

fn check_len(what: &'static str, v: &[f64], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(Error::ShapeMismatch {
            op: what,
            lhs: vec![v.len()],
            rhs: vec![want],
        });
    }
    Ok(())
}

/// Parameters of the built-in problems. Unset fields take each problem's
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuiltinParams {
    pub horizon: Option<f64>,
    /// Every coordinate of `x₀`.
    pub x0: Option<f64>,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

impl Default for BuiltinParams {
    fn default() -> Self {
        Self {
            horizon: None,
            x0: None,
            sigma_lo: 1.0,
            sigma_hi: 2.0,
        }
    }
}

pub const BUILTIN_NAMES: [&str; 5] = ["lq", "lq_ones", "nonlinear", "gexp", "transcendental"];

pub fn make_builtin(name: &str, n: usize, params: &BuiltinParams) -> Result<Problem> {
    if n == 0 {
        return Err(Error::invalid("state dimension must be at least 1"));
    }
    if let Some(t) = params.horizon {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {t}")));
        }
    }
    let prob: Problem = match name {
        "lq" => Arc::new(LinearQuadratic::new(n, Terminal::Identity, params)),
        "lq_ones" => Arc::new(LinearQuadratic::new(n, Terminal::Ones, params)),
        "nonlinear" => Arc::new(Nonlinear::new(n, params)),
        "gexp" => Arc::new(GExpectation::new(n, params)?),
        "transcendental" => Arc::new(Transcendental::new(n, params)),
        other => return Err(Error::UnknownProblem(other.to_string())),
    };
    Ok(prob)
}

pub(crate) fn zeros_like(g: &mut Graph, x: Var) -> Result<Var> {
    let (r, c) = (g.rows(x), g.cols(x));
    g.constant(Tensor::zeros(&[r, c]))
}

pub(crate) fn scaled_identity(n: usize, s: f64) -> Tensor {
    let mut t = Tensor::zeros(&[1, n * n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = s;
    }
    t
}

/// `|a|²` per row, `B×1`.
pub(crate) fn sq_norm(g: &mut Graph, a: Var) -> Result<Var> {
    let s = g.square(a)?;
    g.sum_cols(s)
}

/// Per-row inner product, `B×1`.
pub(crate) fn dot(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let m = g.mul(a, b)?;
    g.sum_cols(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_names_and_bad_dims_are_rejected() {
        let p = BuiltinParams::default();
        assert!(matches!(make_builtin("heat", 2, &p), Err(Error::UnknownProblem(_))));
        assert!(make_builtin("lq", 0, &p).is_err());
        let bad = BuiltinParams {
            horizon: Some(-1.0),
            ..p.clone()
        };
        assert!(make_builtin("lq", 2, &bad).is_err());
        for name in BUILTIN_NAMES {
            let prob = make_builtin(name, 3, &p).unwrap();
            assert_eq!(prob.name(), name);
            assert_eq!(prob.x0().len(), 3);
        }
    }

    #[test]
    fn dense_and_diagonal_agree() {
        let mut g = Graph::new();
        let diag = g.constant(Tensor::row(&[2.0, 3.0])).unwrap();
        let dense = g
            .constant(Tensor::row(&[2.0, 0.0, 0.0, 3.0]))
            .unwrap();
        let a = Diffusion::Diagonal { diag };
        let b = Diffusion::Dense {
            sigma: dense,
            n: 2,
            d: 2,
        };
        let dw = g.constant(Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap()).unwrap();
        let q = g
            .constant(Tensor::from_rows(&[vec![1.0, 5.0, 7.0, -1.0], vec![0.0, 1.0, 1.0, 2.0]]).unwrap())
            .unwrap();
        let (ya, yb) = (a.apply(&mut g, dw).unwrap(), b.apply(&mut g, dw).unwrap());
        assert_eq!(g.value(ya), g.value(yb));
        let (ta, tb) = (a.trace_with(&mut g, q).unwrap(), b.trace_with(&mut g, q).unwrap());
        assert_eq!(g.value(ta), g.value(tb));
        assert_eq!(g.value(ta).data(), &[-1.0, 6.0]);
        assert_eq!(a.dense_row(&g, 1), vec![2.0, 0.0, 0.0, 3.0]);
    }
}
