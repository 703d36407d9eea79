//! Tape gradients against central differences: a few composite functions
//! covering every primitive family, then the full penalized training loss.

use crate::autodiff::{central_difference, finite_diff_check, max_relative_error, Graph, Var};
use crate::error::Result;
use crate::problems::{make_builtin, BuiltinParams};
use crate::rollout::{BrownianBatch, TimeGrid};
use crate::solvers::{Algorithm, Solver, TrainConfig};

pub const GRADCHECK_TOL: f64 = 1e-5;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheck {
    fn new(name: impl Into<String>, max_rel_err: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_err,
            passed: max_rel_err <= GRADCHECK_TOL,
        }
    }
}

type Build = fn(&mut Graph, Var) -> Result<Var>;

fn elementwise(g: &mut Graph, x: Var) -> Result<Var> {
    let a = g.sin(x)?;
    let b = g.cos(x)?;
    let c = g.mul(a, b)?;
    let e = g.exp(c)?;
    let sq = g.square(x)?;
    let pos = g.shift(sq, 1.0)?;
    let l = g.ln(pos)?;
    let r = g.powf(pos, 1.5)?;
    let d = g.div(l, r)?;
    let s = g.add(e, d)?;
    let s = g.sub(s, x)?;
    let s = g.scale(s, 0.7)?;
    let s = g.neg(s)?;
    g.sum(s)
}

fn dense(g: &mut Graph, x: Var) -> Result<Var> {
    // x: 12 values as a 3×4 batch times a 4×1 slice of itself
    let m = g.reshape(x, 3, 4)?;
    let w = g.slice_cols(x, 0, 4)?;
    let w = g.reshape(w, 4, 1)?;
    let h = g.matmul(m, w)?;
    let h = g.relu(h)?;
    let h2 = g.mean_rows(m)?;
    let s = g.sum(h2)?;
    let t = g.sum(h)?;
    let out = g.add(s, t)?;
    g.square(out)
}

fn blocks(g: &mut Graph, x: Var) -> Result<Var> {
    // two rows of 2×2 blocks, rowwise products and transposes
    let m = g.reshape(x, 2, 4)?;
    let mt = g.transpose_blocks(m, 2, 2)?;
    let p = g.bmm(m, mt, 2, 2, 2)?;
    let v = g.gather_cols(m, &[0, 3])?;
    let pv = g.bmm(p, v, 2, 2, 1)?;
    let c = g.concat(&[pv, v])?;
    let r0 = g.select_row(c, 0)?;
    let r0 = g.broadcast_rows(r0, 2)?;
    let r = g.gather_rows(c, &[1, 0])?;
    let z = g.mul(r0, r)?;
    let z = g.sum_cols(z)?;
    g.mean(z)
}

/// Max relative error of the full penalized two-network objective (state
/// dimension `n`, `steps` Euler steps, batch normalization off).
pub fn penalty_loss_gradcheck(n: usize, steps: usize, seed: u64) -> Result<f64> {
    let prob = make_builtin("lq", n, &BuiltinParams::default())?;
    let cfg = TrainConfig {
        steps,
        batch: 8,
        test_paths: 8,
        batch_norm: false,
        ..TrainConfig::preset("lq", n)
    };
    let grid = TimeGrid::new(prob.horizon(), steps)?;
    let dw = BrownianBatch::sample(&grid, cfg.batch, prob.dims().d, seed, 0);
    let mut solver = Solver::new(Algorithm::Alg2, prob, cfg, seed)?;
    let x = solver.flat_params();
    let (_, analytic) = solver.loss_and_gradient(&dw)?;
    let numeric = central_difference(
        |p| {
            solver.set_flat_params(p)?;
            Ok(solver.loss_and_gradient(&dw)?.0)
        },
        &x,
        STEP,
    )?;
    solver.set_flat_params(&x)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// The whole suite, in a fixed order.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let x: Vec<f64> = (0..12).map(|i| ((i as f64) * 0.37 + seed as f64).sin()).collect();
    let cases: [(&str, Build, usize); 3] = [
        ("elementwise", elementwise, 12),
        ("dense_relu", dense, 12),
        ("block_ops", blocks, 8),
    ];
    let mut out = Vec::new();
    for (name, build, len) in cases {
        out.push(GradCheck::new(name, finite_diff_check(build, &x[..len], STEP)?));
    }
    out.push(GradCheck::new("penalty_loss_n2_N2", penalty_loss_gradcheck(2, 2, seed)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in gradcheck_suite(1).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
