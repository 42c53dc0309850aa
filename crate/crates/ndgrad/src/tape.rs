//! Operation record and reverse sweep.
//!
//! Every op validates shapes, computes its output eagerly and appends a
//! node holding the output and its parent handles. Node order on the tape
//! is execution order, so the reverse sweep is a single backwards walk.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{NdError, Result};
use crate::kernels;
use crate::tensor::{check_rank, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchedMatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleLeading(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    Transpose(usize, usize, usize),
    GatherRows(usize, Vec<usize>),
    Select(usize, Vec<usize>),
    Scale(usize, f64),
    AddScalar(usize),
    PairwiseSqDist(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Ordered record of tensor operations.
///
/// A tape is single-threaded; use one tape per thread.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor> {
        self.by_id.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Shape of `b` must equal `a` or be a trailing suffix of it.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(NdError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(NdError::NonFinite { op: "leaf" });
        }
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(NdError::NonFinite { op: name });
        }
        let requires_grad = {
            let inner = self.inner.borrow();
            parents.iter().any(|&p| inner.nodes[p].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn own(&self, v: Var<'_>) -> Result<usize> {
        if std::ptr::eq(self, v.tape) {
            Ok(v.id)
        } else {
            Err(NdError::ForeignVar)
        }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    /// Reverse sweep from a scalar `loss`. A tape can be swept once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let root = self.own(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(NdError::TapeConsumed);
        }
        let loss_shape = inner.nodes[root].value.shape().to_vec();
        if inner.nodes[root].value.numel() != 1 {
            return Err(NdError::NotScalar(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(nodes, id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                out.by_id.insert(id, t);
            }
        }
        Ok(out)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[1];
            if nodes[a].requires_grad {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, val(b).data(), true, &mut da, false);
                accumulate(nodes, grads, a, da);
            }
            if nodes[b].requires_grad {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, val(a).data(), true, g, false, &mut db, false);
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::BatchedMatMul(a, b) => {
            let sa = val(a).shape();
            let (bs, m, k) = (sa[0], sa[1], sa[2]);
            let n = val(b).shape()[2];
            if nodes[a].requires_grad {
                let mut da = vec![0.0; bs * m * k];
                for i in 0..bs {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &val(b).data()[i * k * n..(i + 1) * k * n],
                        true,
                        &mut da[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                accumulate(nodes, grads, a, da);
            }
            if nodes[b].requires_grad {
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &val(a).data()[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut db[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.to_vec());
            if nodes[b].requires_grad {
                accumulate(nodes, grads, b, reduce_broadcast(g, val(b).numel()));
            }
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.to_vec());
            if nodes[b].requires_grad {
                let mut d = reduce_broadcast(g, val(b).numel());
                d.iter_mut().for_each(|v| *v = -*v);
                accumulate(nodes, grads, b, d);
            }
        }
        &Op::Mul(a, b) => {
            let av = val(a).data();
            let bv = val(b).data();
            let nb = bv.len();
            if nodes[a].requires_grad {
                let mut da = Vec::with_capacity(g.len());
                for row in g.chunks(nb) {
                    da.extend(row.iter().zip(bv).map(|(gi, bi)| gi * bi));
                }
                accumulate(nodes, grads, a, da);
            }
            if nodes[b].requires_grad {
                let full: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                accumulate(nodes, grads, b, reduce_broadcast(&full, nb));
            }
        }
        &Op::ScaleLeading(a, b) => {
            let av = val(a).data();
            let bv = val(b).data();
            let inner = (av.len() / bv.len().max(1)).max(1);
            if nodes[a].requires_grad {
                let mut da = Vec::with_capacity(g.len());
                for (row, &c) in g.chunks(inner).zip(bv) {
                    da.extend(row.iter().map(|gi| gi * c));
                }
                accumulate(nodes, grads, a, da);
            }
            if nodes[b].requires_grad {
                let db = g
                    .chunks(inner)
                    .zip(av.chunks(inner))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(gi, ai)| gi * ai).sum())
                    .collect();
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::Relu(a) => {
            let x = val(a).data();
            let d = g
                .iter()
                .zip(x)
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, a, d);
        }
        &Op::LeakyRelu(a, slope) => {
            let x = val(a).data();
            let d = g
                .iter()
                .zip(x)
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { gi * slope })
                .collect();
            accumulate(nodes, grads, a, d);
        }
        &Op::Sigmoid(a) => {
            let d = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
            accumulate(nodes, grads, a, d);
        }
        &Op::Tanh(a) => {
            let d = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
            accumulate(nodes, grads, a, d);
        }
        &Op::Exp(a) => {
            let d = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
            accumulate(nodes, grads, a, d);
        }
        &Op::Log(a) => {
            let x = val(a).data();
            let d = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
            accumulate(nodes, grads, a, d);
        }
        &Op::Recip(a) => {
            let d = g.iter().zip(y).map(|(gi, yi)| -gi * yi * yi).collect();
            accumulate(nodes, grads, a, d);
        }
        &Op::Softmax(a, axis) => {
            let (outer, len, inner) = kernels::axis_split(node.value.shape(), axis);
            let gy: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
            let s = kernels::sum_axis(&gy, outer, len, inner);
            let mut d = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..len {
                    for j in 0..inner {
                        let f = (o * len + i) * inner + j;
                        d[f] = y[f] * (g[f] - s[o * inner + j]);
                    }
                }
            }
            accumulate(nodes, grads, a, d);
        }
        &Op::LogSoftmax(a, axis) => {
            let (outer, len, inner) = kernels::axis_split(node.value.shape(), axis);
            let s = kernels::sum_axis(g, outer, len, inner);
            let mut d = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..len {
                    for j in 0..inner {
                        let f = (o * len + i) * inner + j;
                        d[f] = g[f] - y[f].exp() * s[o * inner + j];
                    }
                }
            }
            accumulate(nodes, grads, a, d);
        }
        &Op::Sum(a) => {
            accumulate(nodes, grads, a, vec![g[0]; val(a).numel()]);
        }
        &Op::Mean(a) => {
            let n = val(a).numel();
            accumulate(nodes, grads, a, vec![g[0] / n as f64; n]);
        }
        &Op::SumAxis(a, axis) | &Op::MeanAxis(a, axis) => {
            let (outer, len, inner) = kernels::axis_split(val(a).shape(), axis);
            let w = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..len {
                    for j in 0..inner {
                        d[(o * len + i) * inner + j] = g[o * inner + j] * w;
                    }
                }
            }
            accumulate(nodes, grads, a, d);
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = kernels::axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if nodes[p].requires_grad {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(nodes, grads, p, d);
                }
                offset += len;
            }
        }
        &Op::Reshape(a) => accumulate(nodes, grads, a, g.to_vec()),
        &Op::Transpose(a, ax0, ax1) => {
            let (_, d) = kernels::transpose(node.value.shape(), g, ax0, ax1);
            accumulate(nodes, grads, a, d);
        }
        Op::GatherRows(a, rows) => {
            let src = val(*a);
            let width = src.numel() / src.shape()[0];
            let mut d = vec![0.0; src.numel()];
            for (k, &r) in rows.iter().enumerate() {
                for c in 0..width {
                    d[r * width + c] += g[k * width + c];
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Select(a, picks) => {
            let mut d = vec![0.0; val(*a).numel()];
            for (k, &p) in picks.iter().enumerate() {
                d[p] += g[k];
            }
            accumulate(nodes, grads, *a, d);
        }
        &Op::Scale(a, c) => {
            accumulate(nodes, grads, a, g.iter().map(|v| v * c).collect());
        }
        &Op::AddScalar(a) => accumulate(nodes, grads, a, g.to_vec()),
        &Op::PairwiseSqDist(a) => {
            let x = val(a);
            let (bs, m, dim) = pairwise_dims(x.shape());
            let xv = x.data();
            let mut d = vec![0.0; xv.len()];
            for b in 0..bs {
                let xb = &xv[b * m * dim..(b + 1) * m * dim];
                let gb = &g[b * m * m..(b + 1) * m * m];
                let db = &mut d[b * m * dim..(b + 1) * m * dim];
                for i in 0..m {
                    for j in 0..m {
                        let w = 2.0 * (gb[i * m + j] + gb[j * m + i]);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..dim {
                            db[i * dim + k] += w * (xb[i * dim + k] - xb[j * dim + k]);
                        }
                    }
                }
            }
            accumulate(nodes, grads, a, d);
        }
    }
}

fn pairwise_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        3 => (shape[0], shape[1], shape[2]),
        _ => (1, shape[0], shape[1]),
    }
}

fn unary_map<'t>(
    v: Var<'t>,
    name: &'static str,
    op: fn(usize) -> Op,
    f: impl Fn(f64) -> f64,
) -> Result<Var<'t>> {
    let tape = v.tape;
    let value = tape.with_value(v.id, |t| {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    })?;
    tape.push(name, value, op(v.id), &[v.id])
}

impl<'t> Var<'t> {
    /// Index of this node on its tape.
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    /// First element; meant for scalars.
    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |t| t.data()[0])
    }

    /// `[m × k] · [k × n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let b = self.tape.own(rhs)?;
        let tape = self.tape;
        let inner = tape.inner.borrow();
        let (x, w) = (&inner.nodes[self.id].value, &inner.nodes[b].value);
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
            return Err(NdError::ShapeMismatch {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, x.data(), false, w.data(), false, &mut out, false);
        drop(inner);
        tape.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(self.id, b), &[self.id, b])
    }

    /// `[B × m × k] · [B × k × n]`.
    pub fn batched_matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let b = self.tape.own(rhs)?;
        let tape = self.tape;
        let inner = tape.inner.borrow();
        let (x, w) = (&inner.nodes[self.id].value, &inner.nodes[b].value);
        let (sx, sw) = (x.shape(), w.shape());
        if x.rank() != 3 || w.rank() != 3 || sx[0] != sw[0] || sx[2] != sw[1] {
            return Err(NdError::ShapeMismatch {
                op: "batched_matmul",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (bs, m, k, n) = (sx[0], sx[1], sx[2], sw[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            kernels::gemm(
                m,
                k,
                n,
                &x.data()[i * m * k..(i + 1) * m * k],
                false,
                &w.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        drop(inner);
        tape.push(
            "batched_matmul",
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchedMatMul(self.id, b),
            &[self.id, b],
        )
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let b = self.tape.own(rhs)?;
        let tape = self.tape;
        let value = {
            let inner = tape.inner.borrow();
            let (x, w) = (&inner.nodes[self.id].value, &inner.nodes[b].value);
            if !broadcast_ok(x.shape(), w.shape()) {
                return Err(NdError::ShapeMismatch {
                    op: name,
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let wv = w.data();
            let n = wv.len();
            let mut data = Vec::with_capacity(x.numel());
            for row in x.data().chunks(n) {
                data.extend(row.iter().zip(wv).map(|(&xi, &wi)| f(xi, wi)));
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        tape.push(name, value, op(self.id, b), &[self.id, b])
    }

    /// Elementwise sum; `rhs` may broadcast over leading axes.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul, |a, b| a * b)
    }

    /// Multiplies slice `i` along axis 0 by `scales[i]`; `scales` has shape `[shape[0]]`.
    pub fn scale_leading(self, scales: Var<'t>) -> Result<Var<'t>> {
        let b = self.tape.own(scales)?;
        let tape = self.tape;
        let value = {
            let inner = tape.inner.borrow();
            let (x, w) = (&inner.nodes[self.id].value, &inner.nodes[b].value);
            if x.rank() == 0 || w.shape() != [x.shape()[0]] {
                return Err(NdError::ShapeMismatch {
                    op: "scale_leading",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let inner_len = x.numel() / w.numel().max(1);
            let mut data = Vec::with_capacity(x.numel());
            for (row, &c) in x.data().chunks(inner_len.max(1)).zip(w.data()) {
                data.extend(row.iter().map(|xi| xi * c));
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        tape.push("scale_leading", value, Op::ScaleLeading(self.id, b), &[self.id, b])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        unary_map(self, "relu", Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            let data = t.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
            Tensor::new(t.shape().to_vec(), data)
        })?;
        tape.push("leaky_relu", value, Op::LeakyRelu(self.id, slope), &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        unary_map(self, "sigmoid", Op::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        unary_map(self, "tanh", Op::Tanh, f64::tanh)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        unary_map(self, "exp", Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        unary_map(self, "log", Op::Log, f64::ln)
    }

    pub fn recip(self) -> Result<Var<'t>> {
        unary_map(self, "recip", Op::Recip, |x| 1.0 / x)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
        })?;
        tape.push("scale", value, Op::Scale(self.id, c), &[self.id])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())
        })?;
        tape.push("add_scalar", value, Op::AddScalar(self.id), &[self.id])
    }

    fn axis_op(
        self,
        axis: usize,
        name: &'static str,
        op: Op,
        f: fn(&mut [f64], usize, usize, usize),
    ) -> Result<Var<'t>> {
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            check_axis(name, t.shape(), axis)?;
            let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
            let mut data = t.data().to_vec();
            f(&mut data, outer, len, inner);
            Tensor::new(t.shape().to_vec(), data)
        })?;
        tape.push(name, value, op, &[self.id])
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.axis_op(axis, "softmax", Op::Softmax(self.id, axis), kernels::softmax)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.axis_op(axis, "log_softmax", Op::LogSoftmax(self.id, axis), kernels::log_softmax)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Result<Var<'t>> {
        let tape = self.tape;
        let s = tape.with_value(self.id, |t| t.data().iter().sum::<f64>());
        tape.push("reduce_sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(self) -> Result<Var<'t>> {
        let tape = self.tape;
        let s = tape.with_value(self.id, |t| t.data().iter().sum::<f64>() / t.numel() as f64);
        tape.push("reduce_mean", Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let name = if mean { "reduce_mean" } else { "reduce_sum" };
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            check_axis(name, t.shape(), axis)?;
            let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
            let mut data = kernels::sum_axis(t.data(), outer, len, inner);
            if mean {
                data.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, data)
        })?;
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        tape.push(name, value, op, &[self.id])
    }

    /// Sums out `axis`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Averages out `axis`.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            check_rank("reshape", shape)?;
            if shape.iter().product::<usize>() != t.numel() {
                return Err(NdError::ShapeMismatch {
                    op: "reshape",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            Tensor::new(shape.to_vec(), t.data().to_vec())
        })?;
        tape.push("reshape", value, Op::Reshape(self.id), &[self.id])
    }

    /// Swaps two axes.
    pub fn transpose(self, ax0: usize, ax1: usize) -> Result<Var<'t>> {
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            check_axis("transpose", t.shape(), ax0.max(ax1))?;
            let (shape, data) = kernels::transpose(t.shape(), t.data(), ax0, ax1);
            Tensor::new(shape, data)
        })?;
        tape.push("transpose", value, Op::Transpose(self.id, ax0, ax1), &[self.id])
    }

    /// Rows (first-axis slices) at `rows`, in that order; repeats allowed.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            let n = t.shape()[0];
            let width = t.numel() / n.max(1);
            if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                return Err(NdError::InvalidShape {
                    op: "gather_rows",
                    shape: t.shape().to_vec(),
                    reason: format!("row {bad} out of range"),
                });
            }
            let mut data = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, data)
        })?;
        tape.push("gather_rows", value, Op::GatherRows(self.id, rows.to_vec()), &[self.id])
    }

    /// Picks elements by flat index into a tensor of `shape`.
    pub fn select(self, flat: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            if let Some(&bad) = flat.iter().find(|&&i| i >= t.numel()) {
                return Err(NdError::InvalidShape {
                    op: "select",
                    shape: t.shape().to_vec(),
                    reason: format!("flat index {bad} out of range"),
                });
            }
            Tensor::new(shape.to_vec(), flat.iter().map(|&i| t.data()[i]).collect())
        })?;
        tape.push("select", value, Op::Select(self.id, flat.to_vec()), &[self.id])
    }

    /// Squared Euclidean distances between rows: `[B × m × d] → [B × m × m]`
    /// (or `[m × d] → [m × m]`).
    pub fn pairwise_sq_dist(self) -> Result<Var<'t>> {
        let tape = self.tape;
        let value = tape.with_value(self.id, |t| {
            if t.rank() < 2 {
                return Err(NdError::InvalidShape {
                    op: "pairwise_sq_dist",
                    shape: t.shape().to_vec(),
                    reason: "expected [m × d] or [B × m × d]".into(),
                });
            }
            let (bs, m, dim) = pairwise_dims(t.shape());
            let x = t.data();
            let mut out = vec![0.0; bs * m * m];
            for b in 0..bs {
                let xb = &x[b * m * dim..(b + 1) * m * dim];
                for i in 0..m {
                    for j in (i + 1)..m {
                        let mut s = 0.0;
                        for k in 0..dim {
                            let d = xb[i * dim + k] - xb[j * dim + k];
                            s += d * d;
                        }
                        out[b * m * m + i * m + j] = s;
                        out[b * m * m + j * m + i] = s;
                    }
                }
            }
            let shape = if t.rank() == 3 { vec![bs, m, m] } else { vec![m, m] };
            Tensor::new(shape, out)
        })?;
        tape.push("pairwise_sq_dist", value, Op::PairwiseSqDist(self.id), &[self.id])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| NdError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let tape = first.tape;
        let ids = parts.iter().map(|p| tape.own(*p)).collect::<Result<Vec<_>>>()?;
        let value = {
            let inner = tape.inner.borrow();
            let base = inner.nodes[ids[0]].value.shape().to_vec();
            check_axis("concat", &base, axis)?;
            let mut total = 0;
            for &id in &ids {
                let s = inner.nodes[id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(NdError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner_sz) = kernels::axis_split(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner_sz);
            for o in 0..outer {
                for &id in &ids {
                    let t = &inner.nodes[id].value;
                    let len = t.shape()[axis];
                    data.extend_from_slice(&t.data()[o * len * inner_sz..(o + 1) * len * inner_sz]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        tape.push("concat", value, Op::Concat(ids.clone(), axis), &ids)
    }
}
