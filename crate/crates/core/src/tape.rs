//! Reverse-mode automatic differentiation on a flat op tape.
//!
//! A [`Tape`] is an append-only arena of tensor nodes. Every op records its
//! inputs by [`TensorId`]; [`Tape::backward`] walks the tape once in reverse
//! and accumulates gradients into every node that requires them. Models
//! build a fresh tape per forward pass and copy parameter gradients back
//! into their [`Tensor`]s afterwards.
//!
//! Gradients of the whole op set are validated against central finite
//! differences by [`finite_difference_check`].

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Op selector for the generic [`Tape::forward_op`] entry point.
#[derive(Debug, Clone)]
pub enum OpSpec {
    Matmul,
    Add,
    Sub,
    MulElementwise,
    ScalarMul(f64),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sum,
    Mean,
    Concat { axis: usize },
    Reshape(Vec<usize>),
    Slice { start: usize, end: usize },
    SoftmaxLastDim,
}

/// How the second operand of add/sub lines up with the first.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Align {
    Exact,
    /// Trailing vector broadcast over the rows of a matrix.
    RowVector,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId, Align),
    Sub(TensorId, TensorId, Align),
    Mul(TensorId, TensorId),
    ScalarMul(TensorId, f64),
    Relu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Concat(Vec<TensorId>, usize),
    Reshape(TensorId),
    Slice(TensorId, usize, usize),
    SoftmaxLastDim(TensorId),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf, keeping its `requires_grad` marker.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Register plain values as a non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![1], vec![v])
    }

    /// Constant matrix of ones, the workhorse for broadcasts via matmul.
    pub fn ones(&mut self, rows: usize, cols: usize) -> TensorId {
        self.constant(vec![rows, cols], vec![1.0; rows * cols])
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
    }

    /// Add this node's gradient into the tensor it was bound from.
    pub fn accumulate_grad_into(&self, id: TensorId, target: &mut Tensor) {
        if let Some(g) = self.grad(id) {
            target.accumulate_grad(g);
        }
    }

    // ── op dispatch ──────────────────────────────────────────────────

    pub fn forward_op(&mut self, op: OpSpec, inputs: &[TensorId]) -> Result<TensorId> {
        match op {
            OpSpec::Matmul => self.matmul(inputs[0], inputs[1]),
            OpSpec::Add => self.add(inputs[0], inputs[1]),
            OpSpec::Sub => self.sub(inputs[0], inputs[1]),
            OpSpec::MulElementwise => self.mul(inputs[0], inputs[1]),
            OpSpec::ScalarMul(c) => self.scalar_mul(c, inputs[0]),
            OpSpec::Relu => self.relu(inputs[0]),
            OpSpec::Sigmoid => self.sigmoid(inputs[0]),
            OpSpec::Tanh => self.tanh(inputs[0]),
            OpSpec::Exp => self.exp(inputs[0]),
            OpSpec::Log => self.log(inputs[0]),
            OpSpec::Sum => self.sum(inputs[0]),
            OpSpec::Mean => self.mean(inputs[0]),
            OpSpec::Concat { axis } => self.concat(inputs, axis),
            OpSpec::Reshape(shape) => self.reshape(inputs[0], shape),
            OpSpec::Slice { start, end } => self.slice_rows(inputs[0], start, end),
            OpSpec::SoftmaxLastDim => self.softmax_lastdim(inputs[0]),
        }
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric { op: op_name });
        }
        Ok(self.push(shape, data, requires_grad, op))
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.finish("matmul", vec![m, n], data, rg, Op::Matmul(a, b))
    }

    fn align(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<Align> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Align::Exact);
        }
        // A trailing vector (c) or (1, c) broadcasts over the rows of (r, c).
        if sa.len() == 2 {
            let c = sa[1];
            if sb == [c] || sb == [1, c] {
                return Ok(Align::RowVector);
            }
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn add_sub(&mut self, a: TensorId, b: TensorId, subtract: bool) -> Result<TensorId> {
        let name: &'static str = if subtract { "sub" } else { "add" };
        let align = self.align(name, a, b)?;
        let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let sign = if subtract { -1.0 } else { 1.0 };
        let data: Vec<f64> = match align {
            Align::Exact => av.iter().zip(bv).map(|(x, y)| x + sign * y).collect(),
            Align::RowVector => {
                let cols = bv.len();
                av.iter()
                    .enumerate()
                    .map(|(i, x)| x + sign * bv[i % cols])
                    .collect()
            }
        };
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        let op = if subtract {
            Op::Sub(a, b, align)
        } else {
            Op::Add(a, b, align)
        };
        self.finish(name, shape, data, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.add_sub(a, b, false)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.add_sub(a, b, true)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul_elementwise",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        self.finish("mul_elementwise", shape, data, rg, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, c: f64, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("scalar_mul", shape, data, rg, Op::ScalarMul(a, c))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.finish(name, shape, data, rg, op)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        // Explicit +0.0 for the non-positive branch keeps outputs sign-clean.
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("sum", vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("mean", vec![1], vec![s / n], rg, Op::Mean(a))
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        assert!(!inputs.is_empty(), "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == rank
                && s.iter()
                    .enumerate()
                    .all(|(d, &v)| d == axis || v == first[d]);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }

        // Row-major copy: iterate outer blocks, append each input's slab.
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let len_axis = self.shape(id)[axis];
                let slab = len_axis * inner;
                let src = &self.nodes[id.0].data[o * slab..(o + 1) * slab];
                data.extend_from_slice(src);
            }
        }
        let rg = self.any_grad(inputs);
        self.finish(
            "concat",
            out_shape,
            data,
            rg,
            Op::Concat(inputs.to_vec(), axis),
        )
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.finish("reshape", shape, data, rg, Op::Reshape(a))
    }

    /// Slice `start..end` along the first axis.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start >= end || end > shape[0] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: shape,
                rhs: vec![start, end],
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.nodes[a.0].data[start * inner..end * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let rg = self.nodes[a.0].requires_grad;
        self.finish("slice", out_shape, data, rg, Op::Slice(a, start, end))
    }

    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_lastdim",
                lhs: shape,
                rhs: vec![],
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.finish("softmax_lastdim", shape, data, rg, Op::SoftmaxLastDim(a))
    }

    // ── compositions used throughout the models ──────────────────────

    /// |x| built from two relu branches; subgradient 0 at the origin.
    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        let neg = self.scalar_mul(-1.0, a)?;
        let pos_part = self.relu(a)?;
        let neg_part = self.relu(neg)?;
        self.add(pos_part, neg_part)
    }

    /// Elementwise min(x, cap) as cap - relu(cap - x).
    pub fn min_with(&mut self, a: TensorId, cap: f64) -> Result<TensorId> {
        let n = self.nodes[a.0].data.len();
        let shape = self.shape(a).to_vec();
        let caps = self.constant(shape, vec![cap; n]);
        let gap = self.sub(caps, a)?;
        let clipped = self.relu(gap)?;
        self.sub(caps, clipped)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; each node is visited exactly once.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.nodes[i].grad.as_ref() {
                Some(g) => g.clone(),
                None => continue, // not on a path to the loss
            };
            for (target, delta) in self.input_grads(i, &g) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                let len = self.nodes[target.0].data.len();
                let slot = self.nodes[target.0]
                    .grad
                    .get_or_insert_with(|| vec![0.0; len]);
                for (s, d) in slot.iter_mut().zip(&delta) {
                    *s += d;
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(TensorId, Vec<f64>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                // dA = g @ B^T
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    for c in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[r * n + j] * bv[c * n + j];
                        }
                        da[r * k + c] = s;
                    }
                }
                // dB = A^T @ g
                let mut db = vec![0.0; k * n];
                for r in 0..k {
                    for c in 0..n {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += av[j * k + r] * g[j * n + c];
                        }
                        db[r * n + c] = s;
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b, align) => {
                let da = g.to_vec();
                let db = match align {
                    Align::Exact => g.to_vec(),
                    Align::RowVector => fold_rows(g, self.nodes[b.0].data.len()),
                };
                vec![(*a, da), (*b, db)]
            }
            Op::Sub(a, b, align) => {
                let da = g.to_vec();
                let db = match align {
                    Align::Exact => g.iter().map(|v| -v).collect(),
                    Align::RowVector => fold_rows(g, self.nodes[b.0].data.len())
                        .into_iter()
                        .map(|v| -v)
                        .collect(),
                };
                vec![(*a, da), (*b, db)]
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                let da = g.iter().zip(bv).map(|(gi, y)| gi * y).collect();
                let db = g.iter().zip(av).map(|(gi, x)| gi * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::ScalarMul(a, c) => vec![(*a, g.iter().map(|gi| gi * c).collect())],
            Op::Relu(a) => {
                let av = &self.nodes[a.0].data;
                vec![(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Sigmoid(a) => {
                let yv = &node.data;
                vec![(*a, g.iter().zip(yv).map(|(gi, y)| gi * y * (1.0 - y)).collect())]
            }
            Op::Tanh(a) => {
                let yv = &node.data;
                vec![(*a, g.iter().zip(yv).map(|(gi, y)| gi * (1.0 - y * y)).collect())]
            }
            Op::Exp(a) => {
                let yv = &node.data;
                vec![(*a, g.iter().zip(yv).map(|(gi, y)| gi * y).collect())]
            }
            Op::Log(a) => {
                let av = &self.nodes[a.0].data;
                vec![(*a, g.iter().zip(av).map(|(gi, x)| gi / x).collect())]
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].data.len();
                vec![(*a, vec![g[0]; n])]
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Concat(inputs, axis) => {
                let out_shape = &node.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let mut grads: Vec<(TensorId, Vec<f64>)> = inputs
                    .iter()
                    .map(|id| (*id, vec![0.0; self.nodes[id.0].data.len()]))
                    .collect();
                let mut cursor = 0;
                for o in 0..outer {
                    for (pos, &id) in inputs.iter().enumerate() {
                        let slab = self.nodes[id.0].shape[*axis] * inner;
                        grads[pos].1[o * slab..(o + 1) * slab]
                            .copy_from_slice(&g[cursor..cursor + slab]);
                        cursor += slab;
                    }
                }
                grads
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Slice(a, start, _end) => {
                let src = &self.nodes[a.0];
                let inner: usize = src.shape[1..].iter().product();
                let mut da = vec![0.0; src.data.len()];
                da[start * inner..start * inner + g.len()].copy_from_slice(g);
                vec![(*a, da)]
            }
            Op::SoftmaxLastDim(a) => {
                let last = *node.shape.last().unwrap();
                let y = &node.data;
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / last {
                    let (ys, gs) = (&y[r * last..(r + 1) * last], &g[r * last..(r + 1) * last]);
                    let dot: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                    for c in 0..last {
                        da[r * last + c] = ys[c] * (gs[c] - dot);
                    }
                }
                vec![(*a, da)]
            }
        }
    }
}

/// Plain row-major matrix product, shared by forward and backward.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn fold_rows(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, v) in g.iter().enumerate() {
        out[i % cols] += v;
    }
    out
}

// ── gradient oracle ──────────────────────────────────────────────────

/// Max relative error between reverse-mode and central-difference
/// gradients of a scalar-valued tensor function at `x`.
///
/// Error is `max_i |g_ad(i) - g_fd(i)| / max(1, |g_fd(i)|)` with probes
/// `f(x ± h e_i)`; probes run through the batch helper so large parameter
/// vectors check quickly.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId> + Sync,
{
    let mut x_ad = x.clone();
    x_ad.requires_grad = true;

    let mut tape = Tape::new();
    let x_id = tape.leaf(&x_ad);
    let loss = f(&mut tape, x_id)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    tape.backward(loss)?;
    let g_ad = tape
        .grad(x_id)
        .ok_or(Error::MissingGrad("gradcheck input".into()))?
        .to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut probe_tape = Tape::new();
        let id = probe_tape.constant(x.shape().to_vec(), data);
        let out = f(&mut probe_tape, id)?;
        let v = probe_tape.value(out)[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric { op: "gradcheck probe" })
        }
    };

    let probes = parallel::map_indexed(x.len(), |i| -> Result<f64> {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
    });

    let mut worst = 0.0f64;
    for (i, probe) in probes.into_iter().enumerate() {
        let g_fd = probe?;
        let err = (g_ad[i] - g_fd).abs() / g_fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_from(tape: &mut Tape, data: Vec<f64>, shape: Vec<usize>, rg: bool) -> TensorId {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = rg;
        tape.leaf(&t)
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false);
        let b = leaf_from(&mut tape, vec![1.0, 1.0], vec![2, 1], false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, vec![0.0; 6], vec![2, 3], false);
        let b = leaf_from(&mut tape, vec![0.0; 4], vec![2, 2], false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![-1.0, 0.0, 2.0], vec![3], false);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_lastdim_shape() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, vec![0.0; 6], vec![3, 2], false);
        let b = leaf_from(&mut tape, vec![0.0; 15], vec![3, 5], false);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[3, 7]);
    }

    #[test]
    fn concat_rows_roundtrip() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, vec![1.0, 2.0], vec![1, 2], false);
        let b = leaf_from(&mut tape, vec![3.0, 4.0], vec![1, 2], false);
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1.0, 2.0], vec![2], true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_product_rule() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, vec![1.0, 1.0], vec![2], true);
        let b = leaf_from(&mut tape, vec![3.0, 5.0], vec![2], false);
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 5.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn backward_accumulates_reuse() {
        let mut tape = Tape::new();
        let y = leaf_from(&mut tape, vec![1.0], vec![1], true);
        let s1 = tape.sum(y).unwrap();
        let s2 = tape.sum(y).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1.0], vec![1], true);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1.0, 2.0], vec![2], true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn row_vector_broadcast_add() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true);
        let b = leaf_from(&mut tape, vec![10.0, 20.0], vec![2], true);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0]); // folded over rows
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0], vec![2, 3], false);
        let y = tape.softmax_lastdim(x).unwrap();
        for row in tape.value(y).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_of_negative_is_numeric_error() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![-1.0], vec![1], false);
        assert!(matches!(tape.log(x), Err(Error::Numeric { op: "log" })));
    }

    #[test]
    fn fd_quadratic_is_tight() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        let err = finite_difference_check(
            |tape, id| {
                let sq = tape.mul(id, id)?;
                tape.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn fd_sigmoid_matches_analytic() {
        let x = Tensor::new(vec![1], vec![0.0]);
        let err = finite_difference_check(
            |tape, id| {
                let s = tape.sigmoid(id)?;
                tape.sum(s)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");

        // Analytic slope at 0 is sigma(0)(1 - sigma(0)) = 0.25.
        let mut xg = x.clone();
        xg.requires_grad = true;
        let mut tape = Tape::new();
        let id = tape.leaf(&xg);
        let s = tape.sigmoid(id).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(id).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn fd_tanh_matches_analytic() {
        let x = Tensor::new(vec![1], vec![0.5]);
        let err = finite_difference_check(
            |tape, id| {
                let t = tape.tanh(id)?;
                tape.sum(t)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");

        let mut xg = x.clone();
        xg.requires_grad = true;
        let mut tape = Tape::new();
        let id = tape.leaf(&xg);
        let t = tape.tanh(id).unwrap();
        let loss = tape.sum(t).unwrap();
        tape.backward(loss).unwrap();
        let analytic = 1.0 - 0.5f64.tanh().powi(2);
        assert!((tape.grad(id).unwrap()[0] - analytic).abs() < 1e-12);
    }

    #[test]
    fn abs_and_min_with_compose() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, vec![-3.0, 0.0, 2.0], vec![3], false);
        let a = tape.abs(x).unwrap();
        assert_eq!(tape.value(a), &[3.0, 0.0, 2.0]);
        let m = tape.min_with(a, 2.5).unwrap();
        assert_eq!(tape.value(m), &[2.5, 0.0, 2.0]);
    }

    #[test]
    fn forward_op_dispatch_matches_methods() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, vec![1.0, -2.0], vec![2], false);
        let via_spec = tape.forward_op(OpSpec::Relu, &[a]).unwrap();
        let direct = tape.relu(a).unwrap();
        assert_eq!(tape.value(via_spec), tape.value(direct));
    }
}
