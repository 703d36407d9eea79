//! Feed-forward networks (affine → batch-norm → ReLU hidden layers, affine
//! output) and the Adam optimizer.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Affine {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// Multilayer perceptron. Hidden layers are optionally batch-normalized on
/// their pre-activations; the output layer is purely affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Affine>,
    norms: Vec<BatchNorm>,
}

impl Mlp {
    /// Weights `N(0, 1/fan_in)`, zero biases, `γ = 1`, `β = 0`, running stats `(0, 1)`.
    pub fn new(widths: &[usize], batch_norm: bool, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "mlp needs at least two positive widths, got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
                    .collect();
                Affine {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("weight shape"),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect::<Vec<_>>();
        let norms = if batch_norm {
            widths[1..widths.len() - 1]
                .iter()
                .map(|&w| BatchNorm {
                    gamma: Tensor::full(&[1, w], 1.0),
                    beta: Tensor::zeros(&[1, w]),
                    running_mean: vec![0.0; w],
                    running_var: vec![1.0; w],
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            norms,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn batch_norm(&self) -> bool {
        !self.norms.is_empty()
    }

    /// Trainable tensors in a fixed order: every `(W, b)` then every `(γ, β)`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for n in &self.norms {
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for n in &mut self.norms {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid("flat parameter length mismatch"));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records the parameters on `g`. With `trainable` they become
    /// differentiable leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundMlp> {
        let params = self
            .params()
            .into_iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundMlp {
            params,
            layers: self.layers.len(),
            running: self
                .norms
                .iter()
                .map(|n| (n.running_mean.clone(), n.running_var.clone()))
                .collect(),
        })
    }

    /// Stores running statistics accumulated by train-mode forwards.
    pub fn commit_stats(&mut self, bound: &BoundMlp) {
        for (n, (m, v)) in self.norms.iter_mut().zip(&bound.running) {
            n.running_mean.clone_from(m);
            n.running_var.clone_from(v);
        }
    }

    /// Eval-mode forward on a plain batch, without recording on a caller graph.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut bound = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let y = bound.forward(&mut g, xv, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Writes a plain-text checkpoint (see [`Mlp::load`]).
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "smpcontrol-mlp 1")?;
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        writeln!(w, "widths {}", widths.join(" "))?;
        writeln!(w, "batch_norm {}", u8::from(self.batch_norm()))?;
        let mut dump = |name: String, t: &[f64], rows: usize, cols: usize| -> Result<()> {
            writeln!(w, "tensor {name} {rows} {cols}")?;
            let vals: Vec<String> = t.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", vals.join(" "))?;
            Ok(())
        };
        for (i, l) in self.layers.iter().enumerate() {
            dump(format!("layer{i}.weight"), l.weight.data(), l.weight.rows(), l.weight.cols())?;
            dump(format!("layer{i}.bias"), l.bias.data(), 1, l.bias.cols())?;
        }
        for (i, n) in self.norms.iter().enumerate() {
            let w = n.gamma.cols();
            dump(format!("norm{i}.gamma"), n.gamma.data(), 1, w)?;
            dump(format!("norm{i}.beta"), n.beta.data(), 1, w)?;
            dump(format!("norm{i}.running_mean"), &n.running_mean, 1, w)?;
            dump(format!("norm{i}.running_var"), &n.running_var, 1, w)?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`Mlp::save`].
    ///
    /// Format: a `smpcontrol-mlp 1` header, `widths …`, `batch_norm 0|1`, then
    /// for every tensor a `tensor <name> <rows> <cols>` line followed by one
    /// line of whitespace-separated values in row-major order.
    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Config("truncated checkpoint".into()))?
                .map_err(Error::from)
        };
        let bad = |m: &str| Error::Config(format!("checkpoint: {m}"));
        if next()?.trim() != "smpcontrol-mlp 1" {
            return Err(bad("unknown header"));
        }
        let widths_line = next()?;
        let widths = widths_line
            .strip_prefix("widths ")
            .ok_or_else(|| bad("missing widths"))?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| bad("bad width")))
            .collect::<Result<Vec<_>>>()?;
        let bn = match next()?.trim() {
            "batch_norm 1" => true,
            "batch_norm 0" => false,
            _ => return Err(bad("missing batch_norm flag")),
        };
        let mut net = Mlp::new(&widths, bn, 0)?;
        let mut read = |expect: &str, len: usize| -> Result<Vec<f64>> {
            let header = next()?;
            let mut parts = header.split_whitespace();
            if parts.next() != Some("tensor") || parts.next() != Some(expect) {
                return Err(bad(&format!("expected tensor {expect}")));
            }
            let vals = next()?
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| bad("bad value")))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != len {
                return Err(bad(&format!("tensor {expect} has wrong length")));
            }
            Ok(vals)
        };
        for (i, l) in net.layers.iter_mut().enumerate() {
            let w = read(&format!("layer{i}.weight"), l.weight.len())?;
            l.weight.data_mut().copy_from_slice(&w);
            let b = read(&format!("layer{i}.bias"), l.bias.len())?;
            l.bias.data_mut().copy_from_slice(&b);
        }
        for (i, n) in net.norms.iter_mut().enumerate() {
            let w = n.gamma.len();
            n.gamma.data_mut().copy_from_slice(&read(&format!("norm{i}.gamma"), w)?);
            n.beta.data_mut().copy_from_slice(&read(&format!("norm{i}.beta"), w)?);
            n.running_mean = read(&format!("norm{i}.running_mean"), w)?;
            n.running_var = read(&format!("norm{i}.running_var"), w)?;
        }
        Ok(net)
    }
}

/// An [`Mlp`] whose parameters live on a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    params: Vec<Var>,
    layers: usize,
    running: Vec<(Vec<f64>, Vec<f64>)>,
}

impl BoundMlp {
    /// Parameter nodes in [`Mlp::params`] order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let batch = g.rows(x);
        let has_bn = !self.running.is_empty();
        if has_bn && mode == Mode::Train && batch < 2 {
            return Err(Error::invalid("train-mode batch norm needs a batch of at least 2"));
        }
        let expected = g.rows(self.params[0]);
        if g.cols(x) != expected {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: g.shape(x).to_vec(),
                rhs: vec![batch, expected],
            });
        }
        let mut h = x;
        for layer in 0..self.layers {
            let (w, b) = (self.params[2 * layer], self.params[2 * layer + 1]);
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            if layer + 1 == self.layers {
                return Ok(z);
            }
            let z = if has_bn {
                self.normalize(g, z, layer, mode)?
            } else {
                z
            };
            h = g.relu(z)?;
        }
        unreachable!("mlp has at least one layer")
    }

    fn normalize(&mut self, g: &mut Graph, z: Var, layer: usize, mode: Mode) -> Result<Var> {
        let base = 2 * self.layers + 2 * layer;
        let (gamma, beta) = (self.params[base], self.params[base + 1]);
        let (rm, rv) = &mut self.running[layer];
        let zn = match mode {
            Mode::Train => {
                let mu = g.mean_rows(z)?;
                let zc = g.sub(z, mu)?;
                let sq = g.square(zc)?;
                let var = g.mean_rows(sq)?;
                let var_eps = g.shift(var, BN_EPS)?;
                let inv = g.powf(var_eps, -0.5)?;
                for ((r, &m), (s, &v)) in rm
                    .iter_mut()
                    .zip(g.value(mu).data())
                    .zip(rv.iter_mut().zip(g.value(var).data()))
                {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                    *s = BN_MOMENTUM * *s + (1.0 - BN_MOMENTUM) * v;
                }
                g.mul(zc, inv)?
            }
            Mode::Eval => {
                let mu = g.constant(Tensor::row(rm))?;
                let inv: Vec<f64> = rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let inv = g.constant(Tensor::row(&inv))?;
                let zc = g.sub(z, mu)?;
                g.mul(zc, inv)?
            }
        };
        let scaled = g.mul(zn, gamma)?;
        g.add(scaled, beta)
    }
}

/// Adam moments for a fixed list of parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(block_sizes: &[usize]) -> Self {
        Self {
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("adam block count mismatch"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::invalid(format!("adam block {i} size mismatch")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient block {i}")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn second_moments(&self) -> impl Iterator<Item = f64> + '_ {
        self.v.iter().flatten().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, max_relative_error};

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn same_seed_same_net() {
        let a = Mlp::new(&[3, 13, 13, 13, 1], true, 7).unwrap();
        let b = Mlp::new(&[3, 13, 13, 13, 1], true, 7).unwrap();
        assert_eq!(a, b);
        let c = Mlp::new(&[3, 13, 13, 13, 1], true, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_degenerate_widths() {
        assert!(Mlp::new(&[3], false, 0).is_err());
        assert!(Mlp::new(&[], false, 0).is_err());
        assert!(Mlp::new(&[3, 0, 1], false, 0).is_err());
    }

    #[test]
    fn zero_weights_collapse_to_bias() {
        let mut net = Mlp::new(&[2, 4, 3], false, 1).unwrap();
        let mut flat = vec![0.0; net.param_count()];
        // output bias sits after W0 (2×4), b0 (4), W1 (4×3)
        let off = 8 + 4 + 12;
        flat[off..off + 3].copy_from_slice(&[1.0, -2.0, 0.5]);
        net.set_flat_params(&flat).unwrap();
        let y = net.predict(&batch(5, 2, 3)).unwrap();
        for r in 0..5 {
            assert_eq!(y.row_slice(r), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn train_mode_normalizes_pre_activations() {
        let net = Mlp::new(&[3, 6, 2], true, 4).unwrap();
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true).unwrap();
        let x = g.constant(batch(16, 3, 5)).unwrap();
        let z = g.matmul(x, bound.params[0]).unwrap();
        let z = g.add(z, bound.params[1]).unwrap();
        let mut b2 = bound.clone();
        let zn = b2.normalize(&mut g, z, 0, Mode::Train).unwrap();
        let t = g.value(zn);
        for c in 0..6 {
            let col: Vec<f64> = (0..16).map(|r| t.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-8);
            // ε = 1e-6 in the denominator perturbs the unit variance slightly
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn train_mode_rejects_single_sample() {
        let net = Mlp::new(&[2, 4, 1], true, 0).unwrap();
        let mut g = Graph::new();
        let mut b = net.bind(&mut g, true).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(b.forward(&mut g, x, Mode::Train).is_err());
        let x = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(b.forward(&mut g, x, Mode::Eval).is_err());
    }

    #[test]
    fn eval_is_pure() {
        let net = Mlp::new(&[3, 8, 8, 2], true, 11).unwrap();
        let x = batch(7, 3, 2);
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn forward_shape_contract() {
        let net = Mlp::new(&[4, 9, 9, 9, 3], true, 2).unwrap();
        for b in [1, 2, 5, 64] {
            assert_eq!(net.predict(&batch(b, 4, 1)).unwrap().shape(), &[b, 3]);
        }
        let mut g = Graph::new();
        let mut bound = net.bind(&mut g, true).unwrap();
        let x = g.constant(batch(2, 4, 3)).unwrap();
        let y = bound.forward(&mut g, x, Mode::Train).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
    }

    #[test]
    fn running_stats_move_with_momentum() {
        let mut net = Mlp::new(&[2, 3, 1], true, 9).unwrap();
        let mut g = Graph::new();
        let mut bound = net.bind(&mut g, true).unwrap();
        let x = g.constant(batch(32, 2, 1)).unwrap();
        bound.forward(&mut g, x, Mode::Train).unwrap();
        net.commit_stats(&bound);
        let rm = &net.norms[0].running_mean;
        let z = g.matmul(x, bound.params[0]).unwrap();
        let mu = g.mean_rows(z).unwrap();
        for (r, m) in rm.iter().zip(g.value(mu).data()) {
            assert!((r - 0.1 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_without_batch_norm() {
        let mut net = Mlp::new(&[3, 7, 7, 7, 2], false, 21).unwrap();
        let x = batch(6, 3, 8);
        let loss_of = |net: &Mlp| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let mut bound = net.bind(&mut g, true)?;
            let xv = g.constant(x.clone())?;
            let y = bound.forward(&mut g, xv, Mode::Train)?;
            let s = g.sin(y)?;
            let out = g.mean(s)?;
            let grads = g.backward(out)?;
            let flat = bound
                .params()
                .iter()
                .flat_map(|&p| grads.wrt(p).into_data())
                .collect();
            Ok((g.value(out).item(), flat))
        };
        let (_, analytic) = loss_of(&net).unwrap();
        let theta = net.flat_params();
        let numeric = central_difference(
            |p| {
                net.set_flat_params(p)?;
                Ok(loss_of(&net)?.0)
            },
            &theta,
            1e-6,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Mlp::new(&[3, 5, 5, 2], true, 3).unwrap();
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        let back = Mlp::load(buf.as_slice()).unwrap();
        assert_eq!(net, back);
        assert!(Mlp::load(&b"garbage\n"[..]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut st = AdamState::new(&[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], 1e-2).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step() {
        let mut st = AdamState::new(&[1]);
        let mut p = vec![0.0];
        st.step(&mut [&mut p], &[&[1.0]], 1e-3).unwrap();
        assert!((p[0] + 1e-3).abs() <= 1e-6);
        assert!(st.second_moments().all(|v| v >= 0.0));
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn adam_constant_gradient_updates_do_not_grow() {
        let mut st = AdamState::new(&[1]);
        let mut p = vec![0.0];
        st.step(&mut [&mut p], &[&[1.0]], 1e-3).unwrap();
        let first = p[0].abs();
        let before = p[0];
        st.step(&mut [&mut p], &[&[1.0]], 1e-3).unwrap();
        let second = (p[0] - before).abs();
        // bias correction makes both updates lr·g/(|g|+ε) up to rounding
        assert!(second <= first * (1.0 + 1e-12), "{first} {second}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut st = AdamState::new(&[1]);
        let mut p = vec![0.0];
        assert!(st.step(&mut [&mut p], &[&[f64::NAN]], 1e-3).is_err());
        assert_eq!(st.steps(), 0);
    }
}
