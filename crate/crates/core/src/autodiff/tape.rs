//! Define-by-run gradient tape.
//!
//! Every primitive appends one node holding its output value and enough
//! saved state to run its vector-Jacobian product. Inputs always precede
//! the node that consumes them, so the reverse pass is a single sweep over
//! the node list from the loss backwards.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Square,
    Sigmoid,
    Tanh,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    BroadcastRows(Var),
    Reduce {
        kind: Reduction,
        input: Var,
        axis: Option<usize>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Vec<bool>, Var, Var),
    Clamp(Var, f64, f64),
    Huber(Var, f64),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::AddScalar(a)
            | Op::BroadcastRows(a)
            | Op::Reduce { input: a, .. }
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Clamp(a, _, _)
            | Op::Huber(a, _)
            | Op::SoftmaxXent { logits: a, .. } => vec![*a],
            Op::Binary(_, a, b)
            | Op::MatMul(a, b)
            | Op::ConcatCols(a, b)
            | Op::SelectRows(_, a, b) => vec![*a, *b],
            Op::ConcatRows(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw `m×k · k×n` product, accumulating into `out`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        if cfg!(debug_assertions)
            && inputs.iter().all(|i| self.nodes[i.0].value.is_finite())
        {
            debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copies `v` into a fresh constant so no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a)))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&x| match op {
                UnaryOp::Neg => -x,
                UnaryOp::Abs => x.abs(),
                UnaryOp::Square => x * x,
                UnaryOp::Sigmoid => sigmoid(x),
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Exp => x.exp(),
            })
            .collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(t, Op::Unary(op, a))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            let name = match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
            };
            return Err(Error::shape(name, x.shape(), y.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| match op {
                BinaryOp::Add => p + q,
                BinaryOp::Sub => p - q,
                BinaryOp::Mul => p * q,
            })
            .collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(t, Op::Binary(op, a, b)))
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

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        self.push(t, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect());
        self.push(t, Op::AddScalar(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.neg(a);
        self.add_scalar(neg, 1.0)
    }

    /// Repeats a `1×n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, n) = self.value(a).dims2()?;
        if r != 1 {
            return Err(Error::shape("broadcast_rows", self.shape(a), &[rows, n]));
        }
        if rows == 1 {
            return Ok(a);
        }
        let row = self.value(a).data();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(row);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, n], data), Op::BroadcastRows(a)))
    }

    /// Sum or mean over one axis (removed from the shape) or over everything
    /// (result has shape `[1]`).
    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let (out_shape, data) = match axis {
            None => {
                let s: f64 = x.data().iter().sum();
                let v = match kind {
                    Reduction::Sum => s,
                    Reduction::Mean if x.numel() == 0 => 0.0,
                    Reduction::Mean => s / x.numel() as f64,
                };
                (vec![1], vec![v])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Axis {
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let (outer, dim, inner) = split_axis(&shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                if kind == Reduction::Mean && dim > 0 {
                    out.iter_mut().for_each(|v| *v /= dim as f64);
                }
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                (out_shape, out)
            }
        };
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Reduce {
                kind,
                input: a,
                axis,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Sum, a, None)
            .expect("full reduction cannot fail")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Mean, a, None)
            .expect("full reduction cannot fail")
    }

    /// Gathers rows of a matrix; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "table",
                    id,
                    bound: rows,
                });
            }
            data.extend_from_slice(self.value(table).row_slice(id));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), cols], data),
            Op::GatherRows(table, ids.to_vec()),
        ))
    }

    /// Horizontal concatenation `[a | b]` of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).dims2()?;
        let (m2, q) = self.value(b).dims2()?;
        if m != m2 {
            return Err(Error::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(self.value(a).row_slice(i));
            data.extend_from_slice(self.value(b).row_slice(i));
        }
        Ok(self.push(Tensor::from_parts(vec![m, p + q], data), Op::ConcatCols(a, b)))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let (_, cols) = self.value(first).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start > end || end > n {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{end} out of range for {n} columns"
            )));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&self.value(a).row_slice(i)[start..end]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, end - start], data),
            Op::SliceCols(a, start),
        ))
    }

    /// Row `i` of the result is row `i` of `on` where `mask[i]`, else of `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        if self.shape(on) != self.shape(off) {
            return Err(Error::shape("select_rows", self.shape(on), self.shape(off)));
        }
        let (m, _) = self.value(on).dims2()?;
        if mask.len() != m {
            return Err(Error::Dimension(format!(
                "select_rows mask has {} entries for {m} rows",
                mask.len()
            )));
        }
        if mask.iter().all(|&b| b) {
            return Ok(on);
        }
        if mask.iter().all(|&b| !b) {
            return Ok(off);
        }
        let mut data = Vec::with_capacity(self.value(on).numel());
        for (i, &keep) in mask.iter().enumerate() {
            let src = if keep { on } else { off };
            data.extend_from_slice(self.value(src).row_slice(i));
        }
        let shape = self.shape(on).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::SelectRows(mask.to_vec(), on, off),
        ))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|v| v.clamp(lo, hi)).collect(),
        );
        self.push(t, Op::Clamp(a, lo, hi))
    }

    /// Elementwise Huber penalty: `e²/2` for `|e| ≤ δ`, else `δ|e| − δ²/2`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 || !delta.is_finite() {
            return Err(Error::Invalid(format!("huber delta must be positive, got {delta}")));
        }
        let x = self.value(a);
        let t = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&e| huber_value(e, delta)).collect(),
        );
        Ok(self.push(t, Op::Huber(a, delta)))
    }

    /// `Σ_i mask_i · −log softmax(logits_i)[target_i]`, a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[f64],
    ) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: {n} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            let row = self.value(logits).row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &l) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            probs[i * v..(i + 1) * v].iter_mut().for_each(|p| *p /= z);
            if mask[i] != 0.0 {
                let t = targets[i];
                if t >= v {
                    return Err(Error::Index {
                        what: "vocabulary",
                        id: t,
                        bound: v,
                    });
                }
                loss += mask[i] * (z.ln() - (row[t] - max));
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(loss.0 + 1);
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let entry = if matches!(node.op, Op::Leaf) && node.requires_grad {
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(shape),
                })
            } else {
                None
            };
            out.push(entry);
        }
        // leaves recorded after the loss never influence it
        for node in &self.nodes[loss.0 + 1..] {
            out.push(if matches!(node.op, Op::Leaf) && node.requires_grad {
                Some(Tensor::zeros(node.value.shape().to_vec()))
            } else {
                None
            });
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                if !wants(*a) {
                    return;
                }
                let x = self.value(*a).data();
                accumulate(grads, *a, x.len(), |dst| {
                    for j in 0..dst.len() {
                        dst[j] += g[j]
                            * match op {
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Abs => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else if x[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Square => 2.0 * x[j],
                                UnaryOp::Sigmoid => out[j] * (1.0 - out[j]),
                                UnaryOp::Tanh => 1.0 - out[j] * out[j],
                                UnaryOp::Exp => out[j],
                            };
                    }
                });
            }
            Op::Binary(op, a, b) => {
                let n = g.len();
                if wants(*a) {
                    let y = self.value(*b).data();
                    accumulate(grads, *a, n, |dst| match op {
                        BinaryOp::Add | BinaryOp::Sub => add_into(dst, g),
                        BinaryOp::Mul => {
                            for j in 0..n {
                                dst[j] += g[j] * y[j];
                            }
                        }
                    });
                }
                if wants(*b) {
                    let x = self.value(*a).data();
                    accumulate(grads, *b, n, |dst| match op {
                        BinaryOp::Add => add_into(dst, g),
                        BinaryOp::Sub => {
                            for j in 0..n {
                                dst[j] -= g[j];
                            }
                        }
                        BinaryOp::Mul => {
                            for j in 0..n {
                                dst[j] += g[j] * x[j];
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if wants(*a) {
                    // dA = G · Bᵀ
                    let bd = bv.data();
                    accumulate(grads, *a, m * k, |dst| {
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &bd[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g_row[j] * b_row[j];
                                }
                                dst[i * k + p] += s;
                            }
                        }
                    });
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let ad = av.data();
                    accumulate(grads, *b, k * n, |dst| {
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = ad[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                let d_row = &mut dst[p * n..(p + 1) * n];
                                for j in 0..n {
                                    d_row[j] += a_ip * g_row[j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (m, n) = (node.value.shape()[1], node.value.shape()[0]);
                    accumulate(grads, *a, m * n, |dst| {
                        for i in 0..m {
                            for j in 0..n {
                                dst[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += c * g[j];
                        }
                    });
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |dst| add_into(dst, g));
                }
            }
            Op::BroadcastRows(a) => {
                if wants(*a) {
                    let n = self.value(*a).numel();
                    accumulate(grads, *a, n, |dst| {
                        for row in g.chunks(n) {
                            add_into(dst, row);
                        }
                    });
                }
            }
            Op::Reduce { kind, input, axis } => {
                if !wants(*input) {
                    return;
                }
                let x = self.value(*input);
                let numel = x.numel();
                match axis {
                    None => {
                        let s = match kind {
                            Reduction::Sum => g[0],
                            Reduction::Mean => g[0] / numel.max(1) as f64,
                        };
                        accumulate(grads, *input, numel, |dst| {
                            dst.iter_mut().for_each(|d| *d += s)
                        });
                    }
                    Some(ax) => {
                        let (outer, dim, inner) = split_axis(x.shape(), *ax);
                        let f = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / dim.max(1) as f64,
                        };
                        accumulate(grads, *input, numel, |dst| {
                            for o in 0..outer {
                                let src = &g[o * inner..(o + 1) * inner];
                                for d in 0..dim {
                                    let base = (o * dim + d) * inner;
                                    for j in 0..inner {
                                        dst[base + j] += f * src[j];
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                if wants(*table) {
                    let t = self.value(*table);
                    let cols = t.shape()[1];
                    accumulate(grads, *table, t.numel(), |dst| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(
                                &mut dst[id * cols..(id + 1) * cols],
                                &g[r * cols..(r + 1) * cols],
                            );
                        }
                    });
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).shape()[1];
                let q = self.value(*b).shape()[1];
                let m = self.value(*a).shape()[0];
                if wants(*a) {
                    accumulate(grads, *a, m * p, |dst| {
                        for i in 0..m {
                            add_into(&mut dst[i * p..(i + 1) * p], &g[i * (p + q)..i * (p + q) + p]);
                        }
                    });
                }
                if wants(*b) {
                    accumulate(grads, *b, m * q, |dst| {
                        for i in 0..m {
                            add_into(
                                &mut dst[i * q..(i + 1) * q],
                                &g[i * (p + q) + p..(i + 1) * (p + q)],
                            );
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if wants(p) {
                        accumulate(grads, p, n, |dst| add_into(dst, &g[offset..offset + n]));
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let w = node.value.shape()[1];
                    accumulate(grads, *a, m * n, |dst| {
                        for i in 0..m {
                            add_into(
                                &mut dst[i * n + start..i * n + start + w],
                                &g[i * w..(i + 1) * w],
                            );
                        }
                    });
                }
            }
            Op::SelectRows(mask, on, off) => {
                let n = node.value.shape()[1];
                for (src, keep) in [(*on, true), (*off, false)] {
                    if !wants(src) {
                        continue;
                    }
                    accumulate(grads, src, g.len(), |dst| {
                        for (i, &m) in mask.iter().enumerate() {
                            if m == keep {
                                add_into(&mut dst[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                            }
                        }
                    });
                }
            }
            Op::Clamp(a, lo, hi) => {
                if wants(*a) {
                    let x = self.value(*a).data();
                    accumulate(grads, *a, x.len(), |dst| {
                        for j in 0..dst.len() {
                            if x[j] >= *lo && x[j] <= *hi {
                                dst[j] += g[j];
                            }
                        }
                    });
                }
            }
            Op::Huber(a, delta) => {
                if wants(*a) {
                    let x = self.value(*a).data();
                    accumulate(grads, *a, x.len(), |dst| {
                        for j in 0..dst.len() {
                            dst[j] += g[j] * huber_grad(x[j], *delta);
                        }
                    });
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                mask,
                probs,
            } => {
                if wants(*logits) {
                    let v = self.value(*logits).shape()[1];
                    accumulate(grads, *logits, probs.len(), |dst| {
                        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                            if m == 0.0 {
                                continue;
                            }
                            let s = g[0] * m;
                            for j in 0..v {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                dst[i * v + j] += s * (probs[i * v + j] - onehot);
                            }
                        }
                    });
                }
            }
        }
    }
}

pub(crate) fn huber_value(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * e.abs() - 0.5 * delta * delta
    }
}

pub(crate) fn huber_grad(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, n: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

/// Gradients of one backward pass, indexed by [`Var`].
///
/// Only leaves that require gradients carry an entry; leaves the loss does
/// not depend on receive zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// `(node id, gradient)` pairs in tape order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}
