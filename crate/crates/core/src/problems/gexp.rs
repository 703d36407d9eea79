use super::{
    diagonal_indices, scaled_identity, sq_norm, zeros_like, BuiltinParams, Capabilities,
    ControlProblem, Diffusion, Dims, Domain, SecondOrderTerms,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Volatility uncertainty: `dx = diag(θ) dW` with `θ ∈ [σ̲, σ̄]ⁿ`, no running
/// cost, `h = −|x|²`. Minimizing `E[h]` gives `−Ê[|x_T|²]`, the sublinear
/// expectation of the quadratic.
///
/// `H = Σᵢ θᵢ qᵢᵢ` is linear in `θ`, so no `H_u` is registered.
#[derive(Debug, Clone)]
pub struct GExpectation {
    n: usize,
    x0: Vec<f64>,
    horizon: f64,
    domain: Domain,
    sigma_lo: f64,
    sigma_hi: f64,
}

impl GExpectation {
    pub fn new(n: usize, params: &BuiltinParams) -> Result<Self> {
        let (lo, hi) = (params.sigma_lo, params.sigma_hi);
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!(
                "gexp needs 0 < sigma_lo <= sigma_hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            n,
            x0: vec![params.x0.unwrap_or(0.0); n],
            horizon: params.horizon.unwrap_or(1.0),
            domain: Domain::Box {
                lo: vec![lo; n],
                hi: vec![hi; n],
            },
            sigma_lo: lo,
            sigma_hi: hi,
        })
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.sigma_lo, self.sigma_hi)
    }

    /// `θ*ᵢ = σ̄` when `qᵢᵢ ≥ 0`, else `σ̲`. Piecewise constant, so recorded as
    /// a constant.
    fn select(&self, g: &mut Graph, q: Var) -> Result<Var> {
        let n = self.n;
        let qv = g.value(q);
        let data = (0..qv.rows())
            .flat_map(|r| {
                let row = qv.row_slice(r);
                (0..n).map(move |i| row[i * n + i])
            })
            .map(|qii| if qii >= 0.0 { self.sigma_hi } else { self.sigma_lo })
            .collect();
        g.constant(Tensor::matrix(qv.rows(), n, data)?)
    }
}

impl ControlProblem for GExpectation {
    fn name(&self) -> &str {
        "gexp"
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
            hamiltonian_u: false,
            hbar: true,
            second_order: true,
        }
    }

    fn display_sign(&self) -> f64 {
        -1.0
    }

    fn drift(&self, g: &mut Graph, _t: f64, x: Var, _u: Var) -> Result<Var> {
        zeros_like(g, x)
    }

    fn diffusion(&self, _g: &mut Graph, _t: f64, _x: Var, u: Var) -> Result<Diffusion> {
        Ok(Diffusion::Diagonal { diag: u })
    }

    fn running_cost(&self, g: &mut Graph, _t: f64, x: Var, _u: Var) -> Result<Var> {
        g.constant(Tensor::zeros(&[g.rows(x), 1]))
    }

    fn terminal_cost(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = sq_norm(g, x)?;
        g.neg(s)
    }

    fn terminal_grad(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.scale(x, -2.0)
    }

    fn terminal_hessian(&self, g: &mut Graph, _x: Var) -> Result<Var> {
        g.constant(scaled_identity(self.n, -2.0))
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

    fn explicit_argmax(&self, g: &mut Graph, _t: f64, _x: Var, _p: Var, q: Var) -> Result<Var> {
        self.select(g, q)
    }

    fn hbar(&self, g: &mut Graph, _t: f64, _x: Var, _p: Var, q: Var) -> Result<Var> {
        let theta = self.select(g, q)?;
        let q_diag = g.gather_cols(q, &diagonal_indices(self.n))?;
        let m = g.mul(theta, q_diag)?;
        g.sum_cols(m)
    }

    fn hbar_x(&self, g: &mut Graph, _t: f64, x: Var, _p: Var, _q: Var) -> Result<Var> {
        zeros_like(g, x)
    }

    fn hbar_p(&self, g: &mut Graph, _t: f64, x: Var, _p: Var, _q: Var) -> Result<Var> {
        zeros_like(g, x)
    }

    fn hbar_q(&self, g: &mut Graph, _t: f64, _x: Var, _p: Var, q: Var) -> Result<Diffusion> {
        Ok(Diffusion::Diagonal {
            diag: self.select(g, q)?,
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

    fn params() -> BuiltinParams {
        BuiltinParams {
            sigma_lo: 1.0,
            sigma_hi: 2.0,
            ..BuiltinParams::default()
        }
    }

    #[test]
    fn indicator_rule() {
        let prob = make_builtin("gexp", 2, &params()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let q = g.constant(Tensor::row(&[0.5, 9.0, 9.0, -0.5])).unwrap();
        let theta = prob.explicit_argmax(&mut g, 0.0, x, x, q).unwrap();
        assert_eq!(g.value(theta).data(), &[2.0, 1.0]);
        let q0 = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let theta0 = prob.explicit_argmax(&mut g, 0.0, x, x, q0).unwrap();
        assert_eq!(g.value(theta0).data(), &[2.0, 2.0]);
    }

    #[test]
    fn hamiltonian_is_theta_times_q() {
        let prob = make_builtin("gexp", 1, &params()).unwrap();
        let h = hamiltonian(prob.as_ref(), 0.0, &[0.3], &[2.0], &[4.0], &[-1.0]).unwrap();
        assert_eq!(h.value, -2.0);
        assert_eq!(h.grad_u, vec![-1.0]);
    }

    #[test]
    fn rejects_bad_bounds() {
        for (lo, hi) in [(0.0, 1.0), (2.0, 1.0), (-1.0, 1.0)] {
            let p = BuiltinParams {
                sigma_lo: lo,
                sigma_hi: hi,
                ..BuiltinParams::default()
            };
            assert!(make_builtin("gexp", 2, &p).is_err());
        }
    }
}
