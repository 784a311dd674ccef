//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every training step. Operations append nodes in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse. Gradients are retained for
//! leaf nodes only; intermediate buffers are released as the sweep passes them.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MulConst(Var, Vec<f64>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Softmax(Var),
    Lookup(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
    StraightThrough(Var),
    Reshape(Var),
    AddGrouped(Var, Var),
    WeightedSum(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build one per worker.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the leaf (zeros when untouched).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.len() == 1 {
            let y = bv.data()[0];
            av.map(|x| f(x, y))
        } else if av.len() == 1 {
            let x = av.data()[0];
            bv.map(|y| f(x, y))
        } else {
            return Err(shape_err("elementwise", av, bv));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Abs => f64::abs,
        };
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, Op::Unary(op, x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v + k);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// `x[m x n] + bias[n]`, bias repeated over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        let n = bv.len();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product with a fixed (non-differentiated) factor.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.len() {
            return Err(Error::Shape {
                op: "mul_const",
                left: xv.shape().to_vec(),
                right: vec![factor.len()],
            });
        }
        let data = xv.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, factor), rg))
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows || v.shape().len() != 2 {
                return Err(shape_err("concat", self.value(parts[0]), v));
            }
            cols += v.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() || xv.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{end} of shape {:?}",
                xv.shape()
            )));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, end - start], out)?,
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// Softmax along the trailing axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.clone();
        for (src, dst) in xv.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            softmax_row(src, dst);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Gathers rows of `table[v x q]`; the result is `[ids.len() x q]`.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, q) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * q);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { index: id, len: v });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), q], out)?,
            Op::Lookup(table, ids.to_vec()),
            rg,
        ))
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]`, computed from
    /// logits for stability.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, n) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * n];
        let mut loss = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= n {
                return Err(Error::IndexOutOfRange { index: t, len: n });
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            if w != 0.0 {
                loss += w * (lse - row[t]);
            }
            for (p, &x) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Node whose forward value is `sample` but whose backward pass hands the
    /// upstream gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, sample: Tensor) -> Result<Var> {
        if sample.shape() != self.shape(x) {
            return Err(shape_err("straight_through", self.value(x), &sample));
        }
        let rg = self.rg(x);
        Ok(self.push(sample, Op::StraightThrough(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `x[g*n x a] + y[g x a]` where row `i` of `x` receives row `i / n` of `y`.
    pub fn add_grouped(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let a = xv.cols();
        if yv.cols() != a || xv.rows() % yv.rows() != 0 {
            return Err(shape_err("add_grouped", xv, yv));
        }
        let n = xv.rows() / yv.rows();
        let mut out = xv.clone();
        for (i, row) in out.data_mut().chunks_mut(a).enumerate() {
            for (o, &b) in row.iter_mut().zip(yv.row(i / n)) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(out, Op::AddGrouped(x, y), rg))
    }

    /// Per-group convex combination: `out[g] = sum_i w[g, i] * v[g*n + i]`
    /// with `w[g x n]`, `v[g*n x a]`.
    pub fn weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(v));
        let (g, n, a) = (wv.rows(), wv.cols(), vv.cols());
        if vv.rows() != g * n {
            return Err(shape_err("weighted_sum", wv, vv));
        }
        let mut out = vec![0.0; g * a];
        for gi in 0..g {
            let dst = &mut out[gi * a..(gi + 1) * a];
            for i in 0..n {
                let wgt = wv.data()[gi * n + i];
                for (o, &x) in dst.iter_mut().zip(vv.row(gi * n + i)) {
                    *o += wgt * x;
                }
            }
        }
        let rg = self.rg(w) || self.rg(v);
        Ok(self.push(Tensor::new(vec![g, a], out)?, Op::WeightedSum(w, v), rg))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Identity in
    /// evaluation mode or at rate zero.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(keep) { scale } else { 0.0 })
            .collect();
        self.mul_const(x, mask)
    }

    fn accum(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn accum_slice(&mut self, v: Var, src: &[f64]) {
        self.accum(v, |g| {
            for (d, s) in g.iter_mut().zip(src) {
                *d += s;
            }
        });
    }

    /// Reverse sweep from a scalar `loss`. Leaves that require gradients end up
    /// with `d loss / d leaf`. Running it twice without
    /// [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Detach the op so the node's inputs can be borrowed mutably.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op, &g);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(b).data(), true, &mut da, false);
                    self.accum_slice(a, &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, g, false, &mut db, false);
                    self.accum_slice(b, &db);
                }
            }
            &Op::Binary(kind, a, b) => {
                let out_len = g.len();
                for (this, other, is_lhs) in [(a, b, true), (b, a, false)] {
                    if !self.rg(this) {
                        continue;
                    }
                    let local: Vec<f64> = match kind {
                        BinaryOp::Add => g.to_vec(),
                        BinaryOp::Sub if is_lhs => g.to_vec(),
                        BinaryOp::Sub => g.iter().map(|x| -x).collect(),
                        BinaryOp::Mul => {
                            let ov = self.value(other).data();
                            if ov.len() == out_len {
                                g.iter().zip(ov).map(|(x, y)| x * y).collect()
                            } else {
                                g.iter().map(|x| x * ov[0]).collect()
                            }
                        }
                    };
                    if self.value(this).len() == out_len {
                        self.accum_slice(this, &local);
                    } else {
                        let s: f64 = local.iter().sum();
                        self.accum(this, |d| d[0] += s);
                    }
                }
            }
            &Op::Unary(kind, x) => {
                let out = &self.nodes[i].value;
                let local: Vec<f64> = match kind {
                    UnaryOp::Sigmoid => g
                        .iter()
                        .zip(out.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect(),
                    UnaryOp::Tanh => g
                        .iter()
                        .zip(out.data())
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect(),
                    UnaryOp::Abs => g
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(g, v)| {
                            if *v > 0.0 {
                                *g
                            } else if *v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                };
                self.accum_slice(x, &local);
            }
            &Op::Scale(x, k) => self.accum(x, |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += k * g;
                }
            }),
            &Op::AddScalar(x) | &Op::Reshape(x) | &Op::StraightThrough(x) => {
                self.accum_slice(x, g)
            }
            &Op::AddBias(x, bias) => {
                self.accum_slice(x, g);
                let n = self.value(bias).len();
                self.accum(bias, |d| {
                    for row in g.chunks(n) {
                        for (d, g) in d.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                });
            }
            Op::MulConst(x, factor) => self.accum(*x, |d| {
                for ((d, g), f) in d.iter_mut().zip(g).zip(factor) {
                    *d += g * f;
                }
            }),
            Op::Concat(parts) => {
                let cols = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.accum(p, |d| {
                        for (r, drow) in d.chunks_mut(pc).enumerate() {
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            for (d, s) in drow.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += pc;
                }
            }
            &Op::SliceCols(x, start) => {
                let w = self.nodes[i].value.cols();
                let cols = self.value(x).cols();
                self.accum(x, |d| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        let dst = &mut d[r * cols + start..r * cols + start + w];
                        for (d, s) in dst.iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let out = &self.nodes[i].value;
                let n = out.cols();
                let mut local = vec![0.0; g.len()];
                for ((s, gr), l) in out
                    .data()
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(local.chunks_mut(n))
                {
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((l, s), gr) in l.iter_mut().zip(s).zip(gr) {
                        *l = s * (gr - dot);
                    }
                }
                self.accum_slice(x, &local);
            }
            Op::Lookup(table, ids) => {
                let q = self.value(*table).cols();
                self.accum(*table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in d[id * q..(id + 1) * q].iter_mut().zip(&g[r * q..(r + 1) * q]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let n = self.value(*logits).cols();
                let up = g[0];
                self.accum(*logits, |d| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let k = up * w;
                        let row = &mut d[r * n..(r + 1) * n];
                        for (d, p) in row.iter_mut().zip(&probs[r * n..(r + 1) * n]) {
                            *d += k * p;
                        }
                        row[t] -= k;
                    }
                });
            }
            &Op::Sum(x) => {
                let up = g[0];
                self.accum(x, |d| d.iter_mut().for_each(|d| *d += up));
            }
            &Op::SumSquares(x) => {
                let up = 2.0 * g[0];
                let xv = self.nodes[x.0].value.data().to_vec();
                self.accum(x, |d| {
                    for (d, v) in d.iter_mut().zip(&xv) {
                        *d += up * v;
                    }
                });
            }
            &Op::AddGrouped(x, y) => {
                self.accum_slice(x, g);
                let a = self.value(y).cols();
                let n = self.value(x).rows() / self.value(y).rows();
                self.accum(y, |d| {
                    for (r, grow) in g.chunks(a).enumerate() {
                        let dst = &mut d[(r / n) * a..(r / n + 1) * a];
                        for (d, s) in dst.iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                });
            }
            &Op::WeightedSum(w, v) => {
                let (groups, n) = (self.value(w).rows(), self.value(w).cols());
                let a = self.value(v).cols();
                if self.rg(w) {
                    let vv = self.value(v);
                    let mut dw = vec![0.0; groups * n];
                    for gi in 0..groups {
                        let grow = &g[gi * a..(gi + 1) * a];
                        for j in 0..n {
                            dw[gi * n + j] =
                                vv.row(gi * n + j).iter().zip(grow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accum_slice(w, &dw);
                }
                if self.rg(v) {
                    let wv = self.value(w).data().to_vec();
                    self.accum(v, |d| {
                        for gi in 0..groups {
                            let grow = &g[gi * a..(gi + 1) * a];
                            for j in 0..n {
                                let wgt = wv[gi * n + j];
                                let row = gi * n + j;
                                for (d, s) in d[row * a..(row + 1) * a].iter_mut().zip(grow) {
                                    *d += wgt * s;
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}
