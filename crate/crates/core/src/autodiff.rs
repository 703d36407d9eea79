//! Reverse-mode automatic differentiation over rank-2 `f64` tensors.
//!
//! A [`Graph`] records every primitive together with its forward value.
//! [`Graph::backward`] then sweeps the nodes once in reverse insertion order,
//! which is a valid reverse topological order because parents are always
//! recorded before their children.
//!
//! Binary elementwise primitives broadcast along either axis when one side
//! has extent 1 there (`B×c ⊕ 1×c`, `B×c ⊕ B×1`, `B×c ⊕ 1×1`).
//!
//! Nodes that do not depend on any differentiable leaf are skipped during the
//! backward sweep, so constants such as Brownian increments cost nothing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Bmm {
        a: Var,
        b: Var,
        r: usize,
        s: usize,
        c: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Relu(..) => "relu",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Powf(..) => "powf",
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::Concat(..) => "concat",
            Op::GatherCols(..) => "gather_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Bmm { .. } => "bmm",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single-owner computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂output/∂v`; zero when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Borrowed flat gradient, `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ra, ca) = dims2(a);
    let (rb, cb) = dims2(b);
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(ra, rb), dim(ca, cb)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

#[inline]
fn bidx(rows: usize, cols: usize, i: usize, j: usize) -> usize {
    let ii = if rows == 1 { 0 } else { i };
    let jj = if cols == 1 { 0 } else { j };
    ii * cols + jj
}

fn binary_forward(
    a: &Tensor,
    b: &Tensor,
    r: usize,
    c: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a.shape() == b.shape() {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let (ra, ca) = dims2(a);
    let (rb, cb) = dims2(b);
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(da[bidx(ra, ca, i, j)], db[bidx(rb, cb, i, j)]));
        }
    }
    out
}

/// Accumulates `g ⊙ df` into a (possibly broadcast) operand gradient.
fn reduce_into(
    acc: &mut [f64],
    shape: (usize, usize),
    out: (usize, usize),
    g: &[f64],
    df: impl Fn(usize) -> f64,
) {
    let (ro, co) = out;
    if shape == out {
        for (k, a) in acc.iter_mut().enumerate() {
            *a += g[k] * df(k);
        }
        return;
    }
    for i in 0..ro {
        for j in 0..co {
            let k = i * co + j;
            acc[bidx(shape.0, shape.1, i, j)] += g[k] * df(k);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(nodes),
        }
    }

    /// Drops all nodes but keeps the allocation for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Differentiable leaves receive adjoints in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if value.rank() != 2 {
            return Err(Error::invalid(format!(
                "graph tensors must be rank 2, got {:?}",
                value.shape()
            )));
        }
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn parameter(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// `1×1` constant.
    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (r, c) = broadcast_shape(op.name(), ta, tb)?;
        let data = binary_forward(ta, tb, r, c, f);
        let rg = self.rg(&[a, b]);
        self.push(op, Tensor::matrix(r, c, data)?, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `a + s` elementwise.
    pub fn shift(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::Shift(a), |x| x + s)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn powf(&mut self, a: Var, e: f64) -> Result<Var> {
        self.unary(a, Op::Powf(a, e), |x| x.powf(e))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `(m×k)·(k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = dims2(ta);
        let (k2, n) = dims2(tb);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let s = da[i * k + l];
                if s == 0.0 {
                    continue;
                }
                let brow = &db[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, rg)
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Mean of all entries, `1×1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// Row sums: `B×c → B×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = dims2(t);
        let data = (0..r)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Op::SumCols(a), Tensor::matrix(r, 1, data)?, rg)
    }

    /// Column means over the batch: `B×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = dims2(t);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, &v) in data.iter_mut().zip(&t.data()[i * c..(i + 1) * c]) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        let rg = self.rg(&[a]);
        self.push(Op::MeanRows(a), Tensor::matrix(1, c, data)?, rg)
    }

    /// Column-wise concatenation of equally tall blocks.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let r = self.rows(*first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.rows(p) != r {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(self.cols(p));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(Op::Concat(parts.to_vec()), Tensor::matrix(r, total, out)?, rg)
    }

    /// `out[:, m] = a[:, idx[m]]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = dims2(t);
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(format!("column {bad} out of range {c}")));
        }
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let rg = self.rg(&[a]);
        self.push(
            Op::GatherCols(a, idx.to_vec()),
            Tensor::matrix(r, idx.len(), out)?,
            rg,
        )
    }

    /// Contiguous column block `[start, start+len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_cols(a, &idx)
    }

    /// `out[m, :] = a[idx[m], :]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = dims2(t);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("row {bad} out of range {r}")));
        }
        let mut out = Vec::with_capacity(c * idx.len());
        for &i in idx {
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(
            Op::GatherRows(a, idx.to_vec()),
            Tensor::matrix(idx.len(), c, out)?,
            rg,
        )
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        self.gather_rows(a, &[row])
    }

    /// Repeats a `1×c` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        if self.rows(a) != 1 {
            return Err(Error::invalid("broadcast_rows expects a single row"));
        }
        self.gather_rows(a, &vec![0; rows])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(vec![rows, cols])?;
        let rg = self.rg(&[a]);
        self.push(Op::Reshape(a), value, rg)
    }

    /// Row-wise small matrix product. Each row of `a` holds an `r×s` matrix and
    /// each row of `b` an `s×c` matrix (row-major); either side may have a single
    /// row that is shared by the whole batch. Output rows hold `r×c` products.
    pub fn bmm(&mut self, a: Var, b: Var, r: usize, s: usize, c: usize) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ba, ca) = dims2(ta);
        let (bb, cb) = dims2(tb);
        let batch = if ba == bb || bb == 1 {
            ba
        } else if ba == 1 {
            bb
        } else {
            0
        };
        if ca != r * s || cb != s * c || batch == 0 {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; batch * r * c];
        for beta in 0..batch {
            let am = &da[(if ba == 1 { 0 } else { beta }) * ca..][..ca];
            let bm = &db[(if bb == 1 { 0 } else { beta }) * cb..][..cb];
            let om = &mut out[beta * r * c..(beta + 1) * r * c];
            for i in 0..r {
                for l in 0..s {
                    let av = am[i * s + l];
                    for j in 0..c {
                        om[i * c + j] += av * bm[l * c + j];
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Op::Bmm { a, b, r, s, c },
            Tensor::matrix(batch, r * c, out)?,
            rg,
        )
    }

    /// Per-row transpose of `r×c` blocks.
    pub fn transpose_blocks(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let idx: Vec<usize> = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather_cols(a, &idx)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(out_shape.to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = dims2(&node.value);
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (sa, sb) = (dims2(val(*a)), dims2(val(*b)));
                if let Some(acc) = self.acc(grads, *a) {
                    reduce_into(acc, sa, out, g, |_| 1.0);
                }
                if let Some(acc) = self.acc(grads, *b) {
                    reduce_into(acc, sb, out, g, |_| sign);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (val(*a), val(*b));
                let (sa, sb) = (dims2(ta), dims2(tb));
                let (da, db) = (ta.data(), tb.data());
                let at = |k: usize| da[bidx(sa.0, sa.1, k / out.1, k % out.1)];
                let bt = |k: usize| db[bidx(sb.0, sb.1, k / out.1, k % out.1)];
                if let Some(acc) = self.acc(grads, *a) {
                    if is_div {
                        reduce_into(acc, sa, out, g, |k| 1.0 / bt(k));
                    } else {
                        reduce_into(acc, sa, out, g, bt);
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    if is_div {
                        reduce_into(acc, sb, out, g, |k| -at(k) / (bt(k) * bt(k)));
                    } else {
                        reduce_into(acc, sb, out, g, at);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(acc) = self.acc(grads, *a) {
                    acc.iter_mut().zip(g).for_each(|(x, &gi)| *x += s * gi);
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                if let Some(acc) = self.acc(grads, *a) {
                    acc.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi);
                }
            }
            Op::Relu(a) | Op::Sin(a) | Op::Cos(a) | Op::Exp(a) | Op::Ln(a) | Op::Powf(a, _) => {
                let x = val(*a).data();
                let y = node.value.data();
                let op = node.op.clone();
                if let Some(acc) = self.acc(grads, *a) {
                    for k in 0..acc.len() {
                        let d = match op {
                            Op::Relu(_) => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Op::Sin(_) => x[k].cos(),
                            Op::Cos(_) => -x[k].sin(),
                            Op::Exp(_) => y[k],
                            Op::Ln(_) => 1.0 / x[k],
                            Op::Powf(_, e) => e * x[k].powf(e - 1.0),
                            _ => unreachable!(),
                        };
                        acc[k] += g[k] * d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = dims2(ta);
                let n = tb.cols();
                let (da, db) = (ta.data(), tb.data());
                if let Some(acc) = self.acc(grads, *a) {
                    // dA = G·Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let brow = &db[l * n..(l + 1) * n];
                            acc[i * k + l] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    // dB = Aᵀ·G
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let s = da[i * k + l];
                            if s == 0.0 {
                                continue;
                            }
                            for (x, &gv) in acc[l * n..(l + 1) * n].iter_mut().zip(grow) {
                                *x += s * gv;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let len = val(*a).len();
                let s = if matches!(node.op, Op::Mean(..)) {
                    g[0] / len as f64
                } else {
                    g[0]
                };
                if let Some(acc) = self.acc(grads, *a) {
                    acc.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SumCols(a) => {
                let c = val(*a).cols();
                if let Some(acc) = self.acc(grads, *a) {
                    for (k, x) in acc.iter_mut().enumerate() {
                        *x += g[k / c];
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = dims2(val(*a));
                if let Some(acc) = self.acc(grads, *a) {
                    for (k, x) in acc.iter_mut().enumerate() {
                        *x += g[k % c] / r as f64;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = out.1;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(acc) = self.acc(grads, p) {
                        for i in 0..out.0 {
                            for j in 0..w {
                                acc[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherCols(a, idx) => {
                let c = val(*a).cols();
                let m = idx.len();
                if let Some(acc) = self.acc(grads, *a) {
                    for i in 0..out.0 {
                        for (jj, &j) in idx.iter().enumerate() {
                            acc[i * c + j] += g[i * m + jj];
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = val(*a).cols();
                if let Some(acc) = self.acc(grads, *a) {
                    for (ii, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            acc[i * c + j] += g[ii * c + j];
                        }
                    }
                }
            }
            Op::Bmm { a, b, r, s, c } => {
                let (r, s, c) = (*r, *s, *c);
                let (ta, tb) = (val(*a), val(*b));
                let (ba, ca) = dims2(ta);
                let (bb, cb) = dims2(tb);
                let (da, db) = (ta.data(), tb.data());
                let batch = out.0;
                if let Some(acc) = self.acc(grads, *a) {
                    for beta in 0..batch {
                        let bm = &db[(if bb == 1 { 0 } else { beta }) * cb..][..cb];
                        let gm = &g[beta * r * c..(beta + 1) * r * c];
                        let base = (if ba == 1 { 0 } else { beta }) * ca;
                        for i in 0..r {
                            for l in 0..s {
                                let mut v = 0.0;
                                for j in 0..c {
                                    v += gm[i * c + j] * bm[l * c + j];
                                }
                                acc[base + i * s + l] += v;
                            }
                        }
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    for beta in 0..batch {
                        let am = &da[(if ba == 1 { 0 } else { beta }) * ca..][..ca];
                        let gm = &g[beta * r * c..(beta + 1) * r * c];
                        let base = (if bb == 1 { 0 } else { beta }) * cb;
                        for i in 0..r {
                            for l in 0..s {
                                let av = am[i * s + l];
                                for j in 0..c {
                                    acc[base + l * c + j] += av * gm[i * c + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Central differences of a scalar function.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe)?;
        probe[i] = x[i] - step;
        let lo = f(&probe)?;
        probe[i] = x[i];
        let d = (hi - lo) / (2.0 * step);
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        out.push(d);
    }
    Ok(out)
}

/// `max_i |a_i − n_i| / max(1, |a_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// `build` receives a fresh graph and a `1×len(x)` differentiable leaf holding
/// `x`, and must return a scalar node.
pub fn finite_diff_check<F>(mut build: F, x: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.parameter(Tensor::row(x))?;
    let out = build(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(leaf).into_data();

    let numeric = central_difference(
        |probe| {
            let mut g = Graph::new();
            let leaf = g.constant(Tensor::row(probe))?;
            let out = build(&mut g, leaf)?;
            Ok(g.value(out).item())
        },
        x,
        step,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(m(3, 1, &[4.0, -2.0, 7.5])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_of_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, 2.0, 3.0, 6.0])).unwrap();
        let y = g.mean(x).unwrap();
        assert_eq!(g.value(y).item(), 3.0);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(3.0)).unwrap();
        let y = g.powf(x, 2.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn relu_left_branch_has_zero_slope() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(-1.0)).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 0.0);
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(0.0)).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::row(&[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::row(&[1.0, 2.0])).unwrap();
        let y = g.parameter(Tensor::scalar(5.0)).unwrap();
        let z = g.square(y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[0.0])).unwrap();
        assert!(matches!(g.ln(a), Err(Error::NonFinite(_))));
        let one = g.scalar(1.0).unwrap();
        assert!(matches!(g.div(one, a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        // f = sum((x + b)·c) with x: 2×2, b: 1×2, c: 2×1
        let mut g = Graph::new();
        let x = g.parameter(m(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.parameter(Tensor::row(&[10.0, 20.0])).unwrap();
        let c = g.parameter(m(2, 1, &[2.0, 3.0])).unwrap();
        let s = g.add(x, b).unwrap();
        let p = g.mul(s, c).unwrap();
        let f = g.sum(p).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 2.0, 3.0, 3.0]);
        assert_eq!(grads.wrt(b).data(), &[5.0, 5.0]);
        assert_eq!(grads.wrt(c).data(), &[33.0, 37.0]);
    }

    #[test]
    fn bmm_with_shared_matrix() {
        let mut g = Graph::new();
        // two rows of 1×2 vectors times a shared 2×2 matrix
        let v = g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = g.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = g.bmm(v, a, 1, 2, 2).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn transpose_blocks_permutes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let t = g.transpose_blocks(a, 2, 3).unwrap();
        assert_eq!(g.value(t).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn quadratic_form_is_exact() {
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &[1.0, 2.0],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn linearity_of_gradients() {
        let x0 = [0.3, -1.2, 2.0];
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let x = g.parameter(Tensor::row(&x0)).unwrap();
            let f = {
                let s = g.sin(x).unwrap();
                g.sum(s).unwrap()
            };
            let h = {
                let sq = g.square(x).unwrap();
                g.sum(sq).unwrap()
            };
            let out = match which {
                0 => f,
                1 => h,
                _ => g.add(f, h).unwrap(),
            };
            g.backward(out).unwrap().wrt(x).into_data()
        };
        let (gf, gh, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..3 {
            assert_eq!(gs[i], gf[i] + gh[i]);
        }
    }
}
