use super::{
    dot, scaled_identity, sq_norm, BuiltinParams, Capabilities, ControlProblem, Diffusion, Dims,
    Domain, SecondOrderTerms,
};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    /// `Q = I`.
    Identity,
    /// `Q = 𝟙𝟙ᵀ`, every entry one.
    Ones,
}

/// `dx = (−x/4 + u)dt + (x/5 + u)dW` with scalar noise,
/// `f = |x|²/4 + |u|²`, `h = ½⟨Qx,x⟩`.
#[derive(Debug, Clone)]
pub struct LinearQuadratic {
    name: &'static str,
    n: usize,
    terminal: Terminal,
    x0: Vec<f64>,
    horizon: f64,
    domain: Domain,
}

impl LinearQuadratic {
    pub fn new(n: usize, terminal: Terminal, params: &BuiltinParams) -> Self {
        Self {
            name: match terminal {
                Terminal::Identity => "lq",
                Terminal::Ones => "lq_ones",
            },
            n,
            terminal,
            x0: vec![params.x0.unwrap_or(1.0); n],
            horizon: params.horizon.unwrap_or(0.1),
            domain: Domain::Free,
        }
    }

    pub fn terminal(&self) -> Terminal {
        self.terminal
    }

    /// `Q` as a dense row-major `n×n` buffer.
    pub fn terminal_matrix(&self) -> Vec<f64> {
        match self.terminal {
            Terminal::Identity => scaled_identity(self.n, 1.0).into_data(),
            Terminal::Ones => vec![1.0; self.n * self.n],
        }
    }

    fn q_times(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.terminal {
            Terminal::Identity => Ok(x),
            Terminal::Ones => {
                let s = g.sum_cols(x)?;
                let ones = g.constant(Tensor::full(&[1, self.n], 1.0))?;
                g.mul(s, ones)
            }
        }
    }
}

impl ControlProblem for LinearQuadratic {
    fn name(&self) -> &str {
        self.name
    }

    fn dims(&self) -> Dims {
        Dims {
            n: self.n,
            d: 1,
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

    fn drift(&self, g: &mut Graph, _t: f64, x: Var, u: Var) -> Result<Var> {
        let a = g.scale(x, -0.25)?;
        g.add(a, u)
    }

    fn diffusion(&self, g: &mut Graph, _t: f64, x: Var, u: Var) -> Result<Diffusion> {
        let a = g.scale(x, 0.2)?;
        let sigma = g.add(a, u)?;
        Ok(Diffusion::Dense {
            sigma,
            n: self.n,
            d: 1,
        })
    }

    fn running_cost(&self, g: &mut Graph, _t: f64, x: Var, u: Var) -> Result<Var> {
        let xx = sq_norm(g, x)?;
        let xx = g.scale(xx, 0.25)?;
        let uu = sq_norm(g, u)?;
        g.add(xx, uu)
    }

    fn terminal_cost(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let qx = self.q_times(g, x)?;
        let v = dot(g, qx, x)?;
        g.scale(v, 0.5)
    }

    fn terminal_grad(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.q_times(g, x)
    }

    fn terminal_hessian(&self, g: &mut Graph, _x: Var) -> Result<Var> {
        g.constant(Tensor::row(&self.terminal_matrix()))
    }

    fn hamiltonian_x(
        &self,
        g: &mut Graph,
        _t: f64,
        x: Var,
        _u: Var,
        p: Var,
        q: Var,
    ) -> Result<Var> {
        // −p/4 + q/5 − x/2
        let a = g.scale(p, -0.25)?;
        let b = g.scale(q, 0.2)?;
        let c = g.scale(x, -0.5)?;
        let s = g.add(a, b)?;
        g.add(s, c)
    }

    fn hamiltonian_u(
        &self,
        g: &mut Graph,
        _t: f64,
        _x: Var,
        u: Var,
        p: Var,
        q: Var,
    ) -> Result<Var> {
        let s = g.add(p, q)?;
        let u2 = g.scale(u, 2.0)?;
        g.sub(s, u2)
    }

    fn explicit_argmax(&self, g: &mut Graph, _t: f64, _x: Var, p: Var, q: Var) -> Result<Var> {
        let s = g.add(p, q)?;
        g.scale(s, 0.5)
    }

    fn hbar(&self, g: &mut Graph, _t: f64, x: Var, p: Var, q: Var) -> Result<Var> {
        // −|x|²/4 − ⟨p,x⟩/4 + ⟨q,x⟩/5 + |p+q|²/4
        let xx = sq_norm(g, x)?;
        let px = dot(g, p, x)?;
        let qx = dot(g, q, x)?;
        let s = g.add(p, q)?;
        let ss = sq_norm(g, s)?;
        let a = g.add(xx, px)?;
        let a = g.scale(a, -0.25)?;
        let b = g.scale(qx, 0.2)?;
        let c = g.scale(ss, 0.25)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    }

    fn hbar_x(&self, g: &mut Graph, t: f64, x: Var, p: Var, q: Var) -> Result<Var> {
        self.hamiltonian_x(g, t, x, x, p, q)
    }

    fn hbar_p(&self, g: &mut Graph, _t: f64, x: Var, p: Var, q: Var) -> Result<Var> {
        let a = g.scale(x, -0.25)?;
        let s = g.add(p, q)?;
        let s = g.scale(s, 0.5)?;
        g.add(a, s)
    }

    fn hbar_q(&self, g: &mut Graph, _t: f64, x: Var, p: Var, q: Var) -> Result<Diffusion> {
        let a = g.scale(x, 0.2)?;
        let s = g.add(p, q)?;
        let s = g.scale(s, 0.5)?;
        let sigma = g.add(a, s)?;
        Ok(Diffusion::Dense {
            sigma,
            n: self.n,
            d: 1,
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
        Ok(SecondOrderTerms {
            b_x: g.constant(scaled_identity(self.n, -0.25))?,
            sigma_x: g.constant(scaled_identity(self.n, 0.2))?,
            h_xx: g.constant(scaled_identity(self.n, -0.5))?,
        })
    }
}
