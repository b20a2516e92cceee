//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, and [`Graph::backward`] replays the tape in reverse.
//! Gradients only flow into nodes that (transitively) depend on a leaf with
//! `requires_grad`, so frozen sub-graphs cost nothing on the way back.

mod kernels;

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};


static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Expand(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    LayerNorm { x: Var, weight: Var, bias: Var, mean: Vec<S>, rstd: Vec<S> },
    Mean(Var, usize),
    Sum(Var),
    Nll(Var, Vec<usize>),
    DepthwiseConv1d(Var, Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Expand(..) => "expand",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Nll(..) => "nll",
            Op::DepthwiseConv1d(..) => "depthwise_conv1d",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Operation tape plus the gradients produced by a single backward pass.
#[derive(Debug)]
pub struct Graph<S> {
    id: u32,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        if v.graph != self.id {
            return Err(Error::UnknownNode(v.index()));
        }
        self.nodes.get(v.index()).ok_or(Error::UnknownNode(v.index()))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let var = Var {
            graph: self.id,
            index: self.nodes.len() as u32,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        var
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.index()].requires_grad)
    }

    /// Adds an input tensor; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad;
        let mut t = t;
        t.zero_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<S>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    /// Gradient of the last backward pass with respect to a leaf.
    ///
    /// Intermediate gradients are released during backward and read as `None`.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor<S>>> {
        let node = self.node(v)?;
        Ok(match self.grads.get(v.index()).and_then(|g| g.as_ref()) {
            Some(g) => Some(Tensor::new(node.value.shape(), g.clone())?),
            None => None,
        })
    }

    // ---- elementwise -------------------------------------------------

    /// `a + b`, where `b`'s shape must equal a suffix of `a`'s shape
    /// (bias vectors, positional tables).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add", format!("{sb:?} does not broadcast onto {sa:?}"));
        }
        let nb = tb.numel().max(1);
        let bd = tb.data();
        let data: Vec<S> = ta
            .data()
            .chunks(nb)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(sa, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.node(a)?.value.map(|v| v * c);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = &self.node(s)?.value;
        if ts.numel() != 1 {
            return shape_err("scale_by", format!("factor must hold one value, shape {:?}", ts.shape()));
        }
        let c = ts.data()[0];
        let out = self.node(a)?.value.map(|v| v * c);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.node(a)?.value.map(kernels::gelu);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gelu(a), rg))
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]` with
    /// broadcasting over the leading (batch) extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let plan = kernels::matmul_plan(ta.shape(), tb.shape()).or_else(|m| shape_err("matmul", m))?;
        let data = kernels::matmul_forward(&plan, ta.data(), tb.data());
        let mut shape = plan.batch_shape.clone();
        shape.extend([plan.m, plan.n]);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let rank = ta.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return shape_err("permute", format!("{axes:?} is not a permutation of rank {rank}"));
        }
        let shape: Vec<usize> = axes.iter().map(|&x| ta.shape()[x]).collect();
        let data = kernels::permute(ta.data(), ta.shape(), axes);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swaps the two innermost axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a)?.len();
        if rank < 2 {
            return shape_err("transpose", format!("rank {rank} < 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(a)?.value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&v) => self.node(v)?.value.shape().to_vec(),
            None => return shape_err("concat", "no inputs"),
        };
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return shape_err("concat", format!("{s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.index()].value;
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// The slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let s = ta.shape();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("narrow", format!("[{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Narrow { x: a, axis, start }, rg))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = *self.shape(a)?.get(axis).ok_or(Error::Shape {
            op: "split",
            msg: format!("axis {axis} out of range"),
        })?;
        if sizes.iter().sum::<usize>() != extent {
            return shape_err("split", format!("sizes {sizes:?} do not cover extent {extent}"));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Repeats `a` over new leading extents: `[..s] -> [..lead, ..s]`.
    pub fn expand(&mut self, a: Var, lead: &[usize]) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let reps: usize = lead.iter().product();
        let mut data = Vec::with_capacity(reps * ta.numel());
        for _ in 0..reps {
            data.extend_from_slice(ta.data());
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(ta.shape());
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Expand(a), rg))
    }

    // ---- normalisation and reductions ---------------------------------

    fn last_extent(&self, a: Var, op: &'static str) -> Result<usize> {
        match self.shape(a)?.last() {
            Some(&w) if w > 0 => Ok(w),
            _ => shape_err(op, "needs a non-empty last axis"),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let w = self.last_extent(a, "softmax")?;
        let ta = &self.nodes[a.index()].value;
        let out = Tensor::new(ta.shape(), kernels::softmax_rows(ta.data(), w))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let w = self.last_extent(a, "log_softmax")?;
        let ta = &self.nodes[a.index()].value;
        let out = Tensor::new(ta.shape(), kernels::log_softmax_rows(ta.data(), w))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Normalises the last axis to zero mean / unit variance, then applies
    /// the per-feature affine `weight`, `bias`.
    pub fn layer_norm(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let w = self.last_extent(x, "layer_norm")?;
        for p in [weight, bias] {
            if self.shape(p)? != [w] {
                return shape_err("layer_norm", format!("affine shape {:?} != [{w}]", self.shape(p)?));
            }
        }
        let tx = &self.nodes[x.index()].value;
        let (tw, tb) = (&self.nodes[weight.index()].value, &self.nodes[bias.index()].value);
        let rows = tx.numel() / w;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.numel());
        let inv_w = S::of(1.0 / w as f64);
        for row in tx.data().chunks(w) {
            let mu = row.iter().copied().sum::<S>() * inv_w;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_w;
            let r = (var + S::of(LAYER_NORM_EPS)).sqrt().recip();
            for ((&v, &g), &b) in row.iter().zip(tw.data()).zip(tb.data()) {
                data.push((v - mu) * r * g + b);
            }
            mean.push(mu);
            rstd.push(r);
        }
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                weight,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let s = ta.shape();
        if axis >= s.len() || s[axis] == 0 {
            return shape_err("mean", format!("axis {axis} invalid for {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let inv = S::of(1.0 / n as f64);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for j in 0..n {
                let src = &ta.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a, axis), rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.node(a)?.value.data().iter().copied().sum::<S>();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise
    /// log-probabilities `[B, C]`.
    pub fn nll(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let t = &self.node(log_probs)?.value;
        let s = t.shape();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return shape_err("nll", format!("log-probs {s:?} vs {} targets", targets.len()));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return shape_err("nll", format!("target {bad} out of range for {c} classes"));
        }
        let total: S = targets.iter().enumerate().map(|(b, &y)| t.data()[b * c + y]).sum();
        let loss = -total / S::of(targets.len() as f64);
        let rg = self.rg(&[log_probs]);
        Ok(self.push(Tensor::scalar(loss), Op::Nll(log_probs, targets.to_vec()), rg))
    }

    /// `log_softmax` followed by `nll`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        self.nll(lp, targets)
    }

    // ---- convolution ---------------------------------------------------

    /// Depthwise 1-D convolution of `x: [B, C, T]` with `w: [C, k]`, odd `k`,
    /// zero "same" padding of `(k - 1) / 2` on both ends.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.node(x)?.value, &self.node(w)?.value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[0] {
            return shape_err("depthwise_conv1d", format!("input {sx:?} with kernel {sw:?}"));
        }
        let k = sw[1];
        if k % 2 == 0 {
            return shape_err("depthwise_conv1d", format!("kernel size {k} must be odd"));
        }
        let data = kernels::depthwise_conv1d_forward(tx.data(), tw.data(), sx[0], sx[1], sx[2], k);
        let out = Tensor::new(sx, data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::DepthwiseConv1d(x, w), rg))
    }

    // ---- backward ------------------------------------------------------

    /// Populates gradients of every `requires_grad` leaf reachable from `loss`.
    ///
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        let shape = self.node(loss)?.value.shape().to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.index()].requires_grad {
            return Ok(());
        }
        self.grads[loss.index()] = Some(vec![S::one()]);
        for i in (0..=loss.index()).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[S]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.index()].value;
        let wants = |v: Var| nodes[v.index()].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |d| add_into(d, g));
                }
                if wants(*b) {
                    let nb = val(*b).numel().max(1);
                    accumulate(grads, *b, nb, |d| {
                        for row in g.chunks(nb) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(tb) {
                            *d += g * y;
                        }
                    });
                }
                if wants(*b) {
                    accumulate(grads, *b, g.len(), |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(g).zip(ta) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.len(), |d| {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d += g * *c;
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                let c = val(*s).data()[0];
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |d| {
                        for (d, &g) in d.iter_mut().zip(g) {
                            *d += g * c;
                        }
                    });
                }
                if wants(*s) {
                    let dot: S = g.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).sum();
                    accumulate(grads, *s, 1, |d| d[0] += dot);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let plan = kernels::matmul_plan(ta.shape(), tb.shape()).expect("validated in forward");
                if wants(*a) {
                    accumulate(grads, *a, ta.numel(), |d| kernels::matmul_backward_a(&plan, g, tb.data(), d));
                }
                if wants(*b) {
                    accumulate(grads, *b, tb.numel(), |d| kernels::matmul_backward_b(&plan, g, ta.data(), d));
                }
            }
            Op::Permute(a, axes) => {
                let inv = kernels::inverse_axes(axes);
                let back = kernels::permute(g, node.value.shape(), &inv);
                accumulate(grads, *a, g.len(), |d| add_into(d, &back));
            }
            Op::Reshape(a) | Op::Expand(a) => {
                let n = val(*a).numel().max(1);
                accumulate(grads, *a, n, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let extent = val(p).shape()[*axis];
                    if wants(p) {
                        accumulate(grads, p, val(p).numel(), |d| {
                            let block = extent * inner;
                            for o in 0..outer {
                                let src = o * s[*axis] * inner + offset * inner;
                                add_into(&mut d[o * block..(o + 1) * block], &g[src..src + block]);
                            }
                        });
                    }
                    offset += extent;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = val(*x).shape();
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                accumulate(grads, *x, val(*x).numel(), |d| {
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let w = *node.value.shape().last().expect("rank >= 1");
                accumulate(grads, *a, g.len(), |d| {
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let dot: S = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let w = *node.value.shape().last().expect("rank >= 1");
                accumulate(grads, *a, g.len(), |d| {
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let total: S = gr.iter().copied().sum();
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += g - y.exp() * total;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                accumulate(grads, *a, g.len(), |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * kernels::gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                weight,
                bias,
                mean,
                rstd,
            } => {
                let tx = val(*x).data();
                let w = val(*weight).numel();
                let gamma = val(*weight).data();
                let xhat = |r: usize, j: usize| (tx[r * w + j] - mean[r]) * rstd[r];
                if wants(*bias) {
                    accumulate(grads, *bias, w, |d| {
                        for row in g.chunks(w) {
                            add_into(d, row);
                        }
                    });
                }
                if wants(*weight) {
                    accumulate(grads, *weight, w, |d| {
                        for (r, row) in g.chunks(w).enumerate() {
                            for (j, &gv) in row.iter().enumerate() {
                                d[j] += gv * xhat(r, j);
                            }
                        }
                    });
                }
                if wants(*x) {
                    let inv_w = S::of(1.0 / w as f64);
                    accumulate(grads, *x, g.len(), |d| {
                        for (r, (dr, gr)) in d.chunks_mut(w).zip(g.chunks(w)).enumerate() {
                            let mut m1 = S::zero();
                            let mut m2 = S::zero();
                            for j in 0..w {
                                let gh = gr[j] * gamma[j];
                                m1 += gh;
                                m2 += gh * xhat(r, j);
                            }
                            m1 *= inv_w;
                            m2 *= inv_w;
                            for j in 0..w {
                                let gh = gr[j] * gamma[j];
                                dr[j] += rstd[r] * (gh - m1 - xhat(r, j) * m2);
                            }
                        }
                    });
                }
            }
            Op::Mean(a, axis) => {
                let s = val(*a).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                let inv = S::of(1.0 / n as f64);
                accumulate(grads, *a, val(*a).numel(), |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += v * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                accumulate(grads, *a, val(*a).numel(), |d| {
                    for d in d.iter_mut() {
                        *d += g0;
                    }
                });
            }
            Op::Nll(lp, targets) => {
                let c = val(*lp).shape()[1];
                let scale = -g[0] / S::of(targets.len() as f64);
                accumulate(grads, *lp, val(*lp).numel(), |d| {
                    for (b, &y) in targets.iter().enumerate() {
                        d[b * c + y] += scale;
                    }
                });
            }
            Op::DepthwiseConv1d(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let s = tx.shape();
                let k = tw.shape()[1];
                let mut dx = wants(*x).then(|| vec![S::zero(); tx.numel()]);
                let mut dw = wants(*w).then(|| vec![S::zero(); tw.numel()]);
                kernels::depthwise_conv1d_backward(
                    g,
                    tx.data(),
                    tw.data(),
                    s[0],
                    s[1],
                    s[2],
                    k,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx.len(), |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw.len(), |d| add_into(d, &dw));
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize, f: impl FnOnce(&mut [S])) {
    let slot = grads[v.index()].get_or_insert_with(|| vec![S::zero(); len]);
    f(slot);
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests;
