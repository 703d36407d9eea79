use super::{
    scaled_identity, sq_norm, zeros_like, BuiltinParams, Capabilities, ControlProblem, Diffusion,
    Dims, Domain, SecondOrderTerms,
};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `dx = 2u dt + √2 dW`, `f = |u|²`, `h = ln(½(1 + |x|²))`.
#[derive(Debug, Clone)]
pub struct Nonlinear {
    n: usize,
    x0: Vec<f64>,
    horizon: f64,
    domain: Domain,
}

impl Nonlinear {
    pub fn new(n: usize, params: &BuiltinParams) -> Self {
        Self {
            n,
            x0: vec![params.x0.unwrap_or(0.0); n],
            horizon: params.horizon.unwrap_or(1.0),
            domain: Domain::Free,
        }
    }

    fn sqrt2(&self, g: &mut Graph) -> Result<Var> {
        g.constant(Tensor::full(&[1, self.n], std::f64::consts::SQRT_2))
    }
}

impl ControlProblem for Nonlinear {
    fn name(&self) -> &str {
        "nonlinear"
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
            explicit_argmax: true,
            hamiltonian_u: true,
            hbar: true,
            second_order: true,
        }
    }

    fn drift(&self, g: &mut Graph, _t: f64, _x: Var, u: Var) -> Result<Var> {
        g.scale(u, 2.0)
    }

    fn diffusion(&self, g: &mut Graph, _t: f64, _x: Var, _u: Var) -> Result<Diffusion> {
        Ok(Diffusion::Diagonal {
            diag: self.sqrt2(g)?,
        })
    }

    fn running_cost(&self, g: &mut Graph, _t: f64, _x: Var, u: Var) -> Result<Var> {
        sq_norm(g, u)
    }

    fn terminal_cost(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let r = sq_norm(g, x)?;
        let a = g.shift(r, 1.0)?;
        let a = g.scale(a, 0.5)?;
        g.ln(a)
    }

    fn terminal_grad(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let r = sq_norm(g, x)?;
        let a = g.shift(r, 1.0)?;
        let two_x = g.scale(x, 2.0)?;
        g.div(two_x, a)
    }

    fn terminal_hessian(&self, g: &mut Graph, x: Var) -> Result<Var> {
        // 2I/(1+|x|²) − 4xxᵀ/(1+|x|²)²
        let n = self.n;
        let r = sq_norm(g, x)?;
        let a = g.shift(r, 1.0)?;
        let inv = g.powf(a, -1.0)?;
        let eye = g.constant(scaled_identity(n, 2.0))?;
        let first = g.mul(eye, inv)?;
        let outer = g.bmm(x, x, n, 1, n)?;
        let inv2 = g.square(inv)?;
        let second = g.mul(outer, inv2)?;
        let second = g.scale(second, 4.0)?;
        g.sub(first, second)
    }

    fn hamiltonian_x(
        &self,
        g: &mut Graph,
        _t: f64,
        x: Var,
        _u: Var,
        _p: Var,
        _q: Var,
    ) -> Result<Var> {
        zeros_like(g, x)
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
        let d = g.sub(p, u)?;
        g.scale(d, 2.0)
    }

    fn explicit_argmax(&self, g: &mut Graph, _t: f64, _x: Var, p: Var, _q: Var) -> Result<Var> {
        // identity node so the control is distinct from p on the tape
        g.scale(p, 1.0)
    }

    fn hbar(&self, g: &mut Graph, _t: f64, _x: Var, p: Var, q: Var) -> Result<Var> {
        let pp = sq_norm(g, p)?;
        let diag = self.sqrt2(g)?;
        let tr = Diffusion::Diagonal { diag }.trace_with(g, q)?;
        g.add(pp, tr)
    }

    fn hbar_x(&self, g: &mut Graph, _t: f64, x: Var, _p: Var, _q: Var) -> Result<Var> {
        zeros_like(g, x)
    }

    fn hbar_p(&self, g: &mut Graph, _t: f64, _x: Var, p: Var, _q: Var) -> Result<Var> {
        g.scale(p, 2.0)
    }

    fn hbar_q(&self, g: &mut Graph, _t: f64, _x: Var, _p: Var, _q: Var) -> Result<Diffusion> {
        Ok(Diffusion::Diagonal {
            diag: self.sqrt2(g)?,
        })
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
        let n = self.n;
        Ok(SecondOrderTerms {
            b_x: g.constant(Tensor::zeros(&[1, n * n]))?,
            sigma_x: g.constant(Tensor::zeros(&[1, n * n * n]))?,
            h_xx: g.constant(Tensor::zeros(&[1, n * n]))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{hamiltonian, make_builtin};

    #[test]
    fn hamiltonian_vanishes_at_rest() {
        let prob = make_builtin("nonlinear", 2, &BuiltinParams::default()).unwrap();
        let h = hamiltonian(prob.as_ref(), 0.3, &[1.0, -2.0], &[0.0, 0.0], &[5.0, 7.0], &[0.0; 4])
            .unwrap();
        assert_eq!(h.value, 0.0);
    }

    #[test]
    fn terminal_at_origin() {
        let prob = make_builtin("nonlinear", 4, &BuiltinParams::default()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let h = prob.terminal_cost(&mut g, x).unwrap();
        assert!((g.value(h).item() - 0.5_f64.ln()).abs() < 1e-15);
    }
}
