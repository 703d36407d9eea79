//! Maximization of the Hamiltonian over the control domain: L-BFGS on free
//! domains, projected gradient ascent on boxes.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::problems::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicy {
    /// Start from the caller-supplied point (e.g. the previous step's maximizer).
    WarmStart,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once the (projected) gradient norm falls below this.
    pub tol: f64,
    pub init: InitPolicy,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 50,
            tol: 1e-8,
            init: InitPolicy::WarmStart,
        }
    }
}

impl OptOptions {
    fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::invalid("L-BFGS memory must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("optimizer tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub u: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iters: usize,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

pub fn project_box(u: &[f64], lo: &[f64], hi: &[f64]) -> Result<Vec<f64>> {
    if u.len() != lo.len() || u.len() != hi.len() {
        return Err(Error::invalid("box bounds do not match the point"));
    }
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return Err(Error::invalid("box has lo > hi"));
    }
    Ok(u.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&x, (&l, &h))| x.clamp(l, h))
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn eval<F>(f: &mut F, u: &[f64]) -> Option<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    match f(u) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => Some((v, g)),
        _ => None,
    }
}

/// Maximizes a smooth objective. `f` returns the value and its gradient.
///
/// Free domains use L-BFGS with Armijo backtracking (`c = 1e-4`, halving).
/// Each line search first tries the unit step and the minimizer of the
/// quadratic through `(0, φ(0), φ'(0))` and `(1, φ(1))`, which makes the
/// search exact on quadratics. Box domains use projected gradient ascent with
/// the same Armijo rule. The returned value is never below the value at the
/// starting point.
pub fn lbfgs_maximize<F>(mut f: F, u0: &[f64], domain: &Domain, opts: &OptOptions) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    opts.validate()?;
    let start: Vec<f64> = match opts.init {
        InitPolicy::WarmStart => u0.to_vec(),
        InitPolicy::Zero => vec![0.0; u0.len()],
    };
    match domain {
        Domain::Free => lbfgs(&mut f, start, opts),
        Domain::Box { lo, hi } => {
            let start = project_box(&start, lo, hi)?;
            projected_ascent(&mut f, start, lo, hi, opts)
        }
    }
}

fn lbfgs<F>(f: &mut F, mut u: Vec<f64>, opts: &OptOptions) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut value, mut grad) =
        eval(f, &u).ok_or_else(|| Error::NonFinite("objective at the starting point".into()))?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iters = 0;
    while iters < opts.max_iters && norm(&grad) > opts.tol {
        iters += 1;
        // two-loop recursion on the ascent problem: direction ≈ −H⁻¹∇
        let mut dir = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &dir);
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for d in dir.iter_mut() {
                *d *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += (a - b) * si;
            }
        }
        let mut slope = dot(&grad, &dir);
        if !(slope > 0.0) {
            history.clear();
            dir.clone_from(&grad);
            slope = dot(&grad, &grad);
        }
        let Some((step, new_u, new_value, new_grad)) = line_search(f, &u, value, slope, &dir) else {
            break;
        };
        let s: Vec<f64> = dir.iter().map(|d| step * d).collect();
        // ascent: y is the change of −∇
        let y: Vec<f64> = grad.iter().zip(&new_grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        u = new_u;
        value = new_value;
        grad = new_grad;
    }
    Ok(OptResult {
        grad_norm: norm(&grad),
        u,
        value,
        iters,
    })
}

type Trial = (f64, Vec<f64>, f64, Vec<f64>);

fn line_search<F>(f: &mut F, u: &[f64], value: f64, slope: f64, dir: &[f64]) -> Option<Trial>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let point = |a: f64| -> Vec<f64> { u.iter().zip(dir).map(|(x, d)| x + a * d).collect() };
    let armijo = |a: f64, v: f64| v >= value + ARMIJO_C * a * slope;
    let mut best: Option<Trial> = None;
    let consider = |a: f64, f: &mut F, best: &mut Option<Trial>| -> Option<f64> {
        let p = point(a);
        let (v, g) = eval(f, &p)?;
        if armijo(a, v) && best.as_ref().is_none_or(|b| v > b.2) {
            *best = Some((a, p, v, g));
        }
        Some(v)
    };
    if let Some(v1) = consider(1.0, f, &mut best) {
        // maximizer of the parabola through φ(0), φ'(0) = slope, φ(1) = v1
        let curv = v1 - value - slope;
        if curv < 0.0 {
            let a = -slope / (2.0 * curv);
            if a.is_finite() && a > 0.0 && (a - 1.0).abs() > 1e-12 {
                consider(a, f, &mut best);
            }
        }
    }
    if best.is_some() {
        return best;
    }
    let mut a = 0.5;
    for _ in 0..MAX_BACKTRACKS {
        consider(a, f, &mut best);
        if best.is_some() {
            return best;
        }
        a *= 0.5;
    }
    None
}

fn projected_gradient_norm(u: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    u.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&x, &gi), (&l, &h))| ((x + gi).clamp(l, h) - x).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn projected_ascent<F>(
    f: &mut F,
    mut u: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    opts: &OptOptions,
) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut value, mut grad) =
        eval(f, &u).ok_or_else(|| Error::NonFinite("objective at the starting point".into()))?;
    let mut iters = 0;
    let mut step = 1.0_f64;
    while iters < opts.max_iters && projected_gradient_norm(&u, &grad, lo, hi) > opts.tol {
        iters += 1;
        let mut accepted = false;
        let mut a = (2.0 * step).min(1e6);
        for _ in 0..MAX_BACKTRACKS {
            let cand: Vec<f64> = u
                .iter()
                .zip(&grad)
                .zip(lo.iter().zip(hi))
                .map(|((&x, &gi), (&l, &h))| (x + a * gi).clamp(l, h))
                .collect();
            let moved: Vec<f64> = cand.iter().zip(&u).map(|(c, x)| c - x).collect();
            if let Some((v, g)) = eval(f, &cand) {
                if v >= value + ARMIJO_C * dot(&grad, &moved) && v >= value {
                    u = cand;
                    value = v;
                    grad = g;
                    step = a;
                    accepted = true;
                    break;
                }
            }
            a *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(OptResult {
        grad_norm: projected_gradient_norm(&u, &grad, lo, hi),
        u,
        value,
        iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parabola(u: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((-(u[0] - 3.0).powi(2), vec![-2.0 * (u[0] - 3.0)]))
    }

    #[test]
    fn quadratic_vertex() {
        for u0 in [-100.0, 0.0, 2.9, 3.0, 50.0] {
            let r = lbfgs_maximize(parabola, &[u0], &Domain::Free, &OptOptions::default()).unwrap();
            assert!((r.u[0] - 3.0).abs() <= 1e-8, "{u0} → {:?}", r);
        }
    }

    #[test]
    fn zero_init_ignores_start() {
        let opts = OptOptions {
            init: InitPolicy::Zero,
            max_iters: 0,
            ..OptOptions::default()
        };
        let r = lbfgs_maximize(parabola, &[7.0], &Domain::Free, &opts).unwrap();
        assert_eq!(r.u, vec![0.0]);
        assert_eq!(r.value, -9.0);
    }

    #[test]
    fn cos_fixed_point() {
        // maximize 2 sin u − u²: stationarity cos u = u
        let f = |u: &[f64]| Ok((2.0 * u[0].sin() - u[0] * u[0], vec![2.0 * u[0].cos() - 2.0 * u[0]]));
        let r = lbfgs_maximize(f, &[0.0], &Domain::Free, &OptOptions::default()).unwrap();
        assert!((r.u[0] - 0.739_085_133_215_160_6).abs() <= 1e-6);
    }

    #[test]
    fn box_clamps() {
        assert_eq!(project_box(&[3.0, -1.0], &[0.0, 0.0], &[2.0, 2.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(project_box(&[0.5, 1.5], &[0.0, 0.0], &[2.0, 2.0]).unwrap(), vec![0.5, 1.5]);
        assert_eq!(project_box(&[9.0], &[1.0], &[1.0]).unwrap(), vec![1.0]);
        assert!(project_box(&[0.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn linear_objective_on_box_hits_the_face() {
        let f = |u: &[f64]| Ok((0.5 * u[0] - 0.5 * u[1], vec![0.5, -0.5]));
        let dom = Domain::Box {
            lo: vec![1.0, 1.0],
            hi: vec![2.0, 2.0],
        };
        let r = lbfgs_maximize(f, &[1.5, 1.5], &dom, &OptOptions::default()).unwrap();
        assert_eq!(r.u, vec![2.0, 1.0]);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(lbfgs_maximize(f, &[0.0], &Domain::Free, &OptOptions::default()).is_err());
    }
}
