use super::{
    diagonal_indices, scaled_identity, sq_norm, BuiltinParams, Capabilities, ControlProblem,
    Diffusion, Dims, Domain, SecondOrderTerms,
};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `dx = sin(u) dt + diag(x) dW` (coordinatewise), `f = |u|²`, `h = ½|x|²`.
///
/// The maximum condition `p cos u = 2u` has no closed form, so only `H_u` is
/// registered.
#[derive(Debug, Clone)]
pub struct Transcendental {
    n: usize,
    x0: Vec<f64>,
    horizon: f64,
    domain: Domain,
}

impl Transcendental {
    pub fn new(n: usize, params: &BuiltinParams) -> Self {
        Self {
            n,
            x0: vec![params.x0.unwrap_or(1.0); n],
            horizon: params.horizon.unwrap_or(0.1),
            domain: Domain::Free,
        }
    }
}

impl ControlProblem for Transcendental {
    fn name(&self) -> &str {
        "transcendental"
    }

    fn dims(&self) -> Dims {
        Dims {
            n: self.n,
            d: self.n,
            k: self.n,
        }
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            explicit_argmax: false,
            hamiltonian_u: true,
            hbar: false,
            second_order: true,
        }
    }

    fn drift(&self, g: &mut Graph, _t: f64, _x: Var, u: Var) -> Result<Var> {
        g.sin(u)
    }

    fn diffusion(&self, _g: &mut Graph, _t: f64, x: Var, _u: Var) -> Result<Diffusion> {
        Ok(Diffusion::Diagonal { diag: x })
    }

    fn running_cost(&self, g: &mut Graph, _t: f64, _x: Var, u: Var) -> Result<Var> {
        sq_norm(g, u)
    }

    fn terminal_cost(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = sq_norm(g, x)?;
        g.scale(s, 0.5)
    }

    fn terminal_grad(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.scale(x, 1.0)
    }

    fn terminal_hessian(&self, g: &mut Graph, _x: Var) -> Result<Var> {
        g.constant(scaled_identity(self.n, 1.0))
    }

    fn hamiltonian_x(
        &self,
        g: &mut Graph,
        _t: f64,
        _x: Var,
        _u: Var,
        _p: Var,
        q: Var,
    ) -> Result<Var> {
        g.gather_cols(q, &diagonal_indices(self.n))
    }

    fn hamiltonian_u(
        &self,
        g: &mut Graph,
        _t: f64,
        _x: Var,
        u: Var,
        p: Var,
        _q: Var,
    ) -> Result<Var> {
        let c = g.cos(u)?;
        let pc = g.mul(p, c)?;
        let u2 = g.scale(u, 2.0)?;
        g.sub(pc, u2)
    }

    fn second_order_terms(
        &self,
        g: &mut Graph,
        _t: f64,
        _x: Var,
        _u: Var,
        _p: Var,
        _q: Var,
    ) -> Result<SecondOrderTerms> {
        // σ_x^j = e_j e_jᵀ
        let n = self.n;
        let mut sx = Tensor::zeros(&[1, n * n * n]);
        for j in 0..n {
            sx.data_mut()[j * n * n + j * n + j] = 1.0;
        }
        Ok(SecondOrderTerms {
            b_x: g.constant(Tensor::zeros(&[1, n * n]))?,
            sigma_x: g.constant(sx)?,
            h_xx: g.constant(Tensor::zeros(&[1, n * n]))?,
        })
    }
}
