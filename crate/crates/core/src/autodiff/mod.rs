//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node whose parents
//! are earlier nodes, so the tape order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Nodes built only from
//! constants do not require gradients and are skipped during the sweep.

mod finite_diff;
pub mod kernels;

pub use finite_diff::{finite_diff_gradient, relative_error, DEFAULT_FD_STEP};

use kernels::{Conv2dGeom, PoolGeom};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp applied to predicted probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { x: Var, k: Var, geom: Conv2dGeom },
    Relu(Var),
    AvgPool { a: Var, geom: PoolGeom },
    MaxPool { a: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Sum(Var),
    SoftmaxRows(Var),
    CrossEntropy { pred: Var, target: Var },
    Row(Var, usize),
    WeightedSum { weights: Var, terms: Vec<Option<Var>> },
    ConcatChannels(Vec<Var>),
    AbsMaxNormalize { a: Var, scales: Vec<f64>, argmax: Vec<Option<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul_elementwise",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::AvgPool { .. } => "avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Sum(..) => "sum",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Row(..) => "row",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::ConcatChannels(..) => "concat_channels",
            Op::AbsMaxNormalize { .. } => "abs_max_normalize",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::CrossEntropy { pred, target } => vec![*pred, *target],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::GlobalAvgPool(a)
            | Op::Sum(a)
            | Op::SoftmaxRows(a)
            | Op::Row(a, _) => vec![*a],
            Op::AvgPool { a, .. } | Op::MaxPool { a, .. } | Op::AbsMaxNormalize { a, .. } => vec![*a],
            Op::WeightedSum { weights, terms } => {
                let mut p = vec![*weights];
                p.extend(terms.iter().flatten());
                p
            }
            Op::ConcatChannels(parts) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the leaves of a graph.
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`; zeros of the right shape if the root does not depend on it.
    pub fn wrt(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, t)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push_unchecked(Op::Constant, t)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        Ok(self.push_unchecked(op, value))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            ref other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * s);
        self.push(Op::Scale(a, s), value)
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], data))
    }

    /// Adds the length-`n` vector `b` to every row of the `m×n` matrix `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let n = sa[1];
        let bias = self.value(b).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let shape = sa.to_vec();
        self.push(Op::AddBias(a, b), Tensor::from_parts(shape, data))
    }

    /// 2-D convolution (cross-correlation) of `x: N×C×H×W` with `k: O×C×kh×kw`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || stride == 0 {
            return Err(Error::shape("conv2d", sx, sk));
        }
        if sx[2] + 2 * pad < sk[2] || sx[3] + 2 * pad < sk[3] {
            return Err(Error::shape("conv2d", sx, sk));
        }
        let geom = Conv2dGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
        };
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), &geom);
        let shape = vec![geom.n, geom.o, geom.out_h(), geom.out_w()];
        self.push(Op::Conv2d { x, k, geom }, Tensor::from_parts(shape, data))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    fn pool_geom(&self, op: &'static str, a: Var, size: usize, stride: usize, pad: usize) -> Result<PoolGeom> {
        let s = self.shape(a);
        if s.len() != 4 || stride == 0 || size == 0 || s[2] + 2 * pad < size || s[3] + 2 * pad < size || pad >= size {
            return Err(Error::shape(op, s, &[size, size]));
        }
        Ok(PoolGeom { n: s[0], c: s[1], h: s[2], w: s[3], size, stride, pad })
    }

    pub fn avg_pool(&mut self, a: Var, size: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.pool_geom("avg_pool", a, size, stride, pad)?;
        let data = kernels::avg_pool_forward(self.value(a).data(), &geom);
        let shape = vec![geom.n, geom.c, geom.out_h(), geom.out_w()];
        self.push(Op::AvgPool { a, geom }, Tensor::from_parts(shape, data))
    }

    pub fn max_pool(&mut self, a: Var, size: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.pool_geom("max_pool", a, size, stride, pad)?;
        let (data, argmax) = kernels::max_pool_forward(self.value(a).data(), &geom);
        let shape = vec![geom.n, geom.c, geom.out_h(), geom.out_w()];
        self.push(Op::MaxPool { a, argmax }, Tensor::from_parts(shape, data))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", s, &[]));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Op::GlobalAvgPool(a), Tensor::from_parts(vec![n, c], data))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Row-wise softmax of a 2-D tensor; a 1-D tensor is treated as one row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let cols = match s.len() {
            1 | 2 => *s.last().unwrap(),
            _ => return Err(Error::shape("softmax_rows", s, &[])),
        };
        let mut data = self.value(a).data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        let shape = s.to_vec();
        self.push(Op::SoftmaxRows(a), Tensor::from_parts(shape, data))
    }

    /// Batch mean of `−Σ_k target_k · log(max(pred_k, 1e-12))`.
    ///
    /// Both arguments are `N×K` with rows summing to one; gradients flow to
    /// both.
    pub fn cross_entropy(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("cross_entropy", pred, target)?;
        let s = self.shape(pred);
        if s.len() != 2 {
            return Err(Error::shape("cross_entropy", s, &[]));
        }
        let (n, k) = (s[0], s[1]);
        for (which, v) in [("pred", pred), ("target", target)] {
            for (row, r) in self.value(v).data().chunks(k.max(1)).enumerate() {
                let sum: f64 = r.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::RowNormalization { which, row, sum });
                }
            }
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mut total = 0.0;
        for (a, b) in p.iter().zip(t) {
            if *b != 0.0 {
                total -= b * a.max(LOG_FLOOR).ln();
            }
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(Op::CrossEntropy { pred, target }, Tensor::scalar(loss))
    }

    /// Row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || i >= s[0] {
            return Err(Error::shape("row", s, &[i]));
        }
        let cols = s[1];
        let data = self.value(a).data()[i * cols..(i + 1) * cols].to_vec();
        self.push(Op::Row(a, i), Tensor::from_vec(data))
    }

    /// `Σ_o weights[o] · terms[o]`, where a `None` term is an all-zero tensor.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[Option<Var>]) -> Result<Var> {
        let ws = self.shape(weights);
        if ws.len() != 1 || ws[0] != terms.len() {
            return Err(Error::shape("weighted_sum", ws, &[terms.len()]));
        }
        let first = terms
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::InvalidArgument("weighted_sum: every term is zero".into()))?;
        let shape = self.shape(*first).to_vec();
        for t in terms.iter().flatten() {
            if self.shape(*t) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape(*t)));
            }
        }
        let w = self.value(weights).data();
        let mut data = vec![0.0; shape.iter().product()];
        for (o, t) in terms.iter().enumerate() {
            if let Some(t) = t {
                for (d, v) in data.iter_mut().zip(self.value(*t).data()) {
                    *d += w[o] * v;
                }
            }
        }
        self.push(
            Op::WeightedSum { weights, terms: terms.to_vec() },
            Tensor::from_parts(shape, data),
        )
    }

    /// Concatenates `N×C_i×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels: no inputs".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 4 {
            return Err(Error::shape("concat_channels", &s0, &[]));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::shape("concat_channels", &s0, s));
            }
            channels += s[1];
        }
        let (n, hw) = (s0[0], s0[2] * s0[3]);
        let mut data = Vec::with_capacity(n * channels * hw);
        for ni in 0..n {
            for p in parts {
                let c = self.shape(*p)[1];
                data.extend_from_slice(&self.value(*p).data()[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        self.push(
            Op::ConcatChannels(parts.to_vec()),
            Tensor::from_parts(vec![n, channels, s0[2], s0[3]], data),
        )
    }

    /// Per-example `|a| / max(max|a|, floor)` over all non-leading axes.
    pub fn abs_max_normalize(&mut self, a: Var, floor: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(Error::shape("abs_max_normalize", &s, &[]));
        }
        let per: usize = s[1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len());
        let mut scales = Vec::with_capacity(s[0]);
        let mut argmax = Vec::with_capacity(s[0]);
        for ex in src.chunks(per.max(1)).take(s[0]) {
            let (mut best, mut best_i) = (0.0_f64, 0);
            for (i, v) in ex.iter().enumerate() {
                if v.abs() > best {
                    best = v.abs();
                    best_i = i;
                }
            }
            let (m, am) = if best > floor { (best, Some(best_i)) } else { (floor, None) };
            data.extend(ex.iter().map(|v| v.abs() / m));
            scales.push(m);
            argmax.push(am);
        }
        self.push(Op::AbsMaxNormalize { a, scales, argmax }, Tensor::from_parts(s, data))
    }

    /// Gradients of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Result<GradMap> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(GradMap { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g, 1.0));
                acc(*b, &mut |s| add_into(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g, 1.0));
                acc(*b, &mut |s| add_into(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| add_into(s, g, *k)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let bt = kernels::transpose(val(*b), k, n);
                    let ga = kernels::matmul(g, &bt, m, n, k);
                    acc(*a, &mut |s| add_into(s, &ga, 1.0));
                }
                if self.nodes[b.0].requires_grad {
                    let at = kernels::transpose(val(*a), m, k);
                    let gb = kernels::matmul(&at, g, k, m, n);
                    acc(*b, &mut |s| add_into(s, &gb, 1.0));
                }
            }
            Op::AddBias(a, b) => {
                let n = self.nodes[b.0].value.numel();
                acc(*a, &mut |s| add_into(s, g, 1.0));
                acc(*b, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv;
                    }
                });
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = kernels::conv2d_backward(val(*x), val(*k), g, geom);
                acc(*x, &mut |s| add_into(s, &dx, 1.0));
                acc(*k, &mut |s| add_into(s, &dk, 1.0));
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::AvgPool { a, geom } => {
                let da = kernels::avg_pool_backward(g, geom);
                acc(*a, &mut |s| add_into(s, &da, 1.0));
            }
            Op::MaxPool { a, argmax } => {
                acc(*a, &mut |s| {
                    for (gv, &i) in g.iter().zip(argmax) {
                        s[i] += gv;
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let sa = self.nodes[a.0].value.shape();
                let hw = sa[2] * sa[3];
                acc(*a, &mut |s| {
                    for (p, gv) in s.chunks_mut(hw).zip(g) {
                        let share = gv / hw as f64;
                        p.iter_mut().for_each(|v| *v += share);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { pred, target } => {
                let n = self.nodes[pred.0].value.shape()[0] as f64;
                let (p, t) = (val(*pred), val(*target));
                let scale = g[0] / n;
                acc(*pred, &mut |s| {
                    for ((s, a), b) in s.iter_mut().zip(p).zip(t) {
                        if *a > LOG_FLOOR {
                            *s -= scale * b / a;
                        }
                    }
                });
                acc(*target, &mut |s| {
                    for (s, a) in s.iter_mut().zip(p) {
                        *s -= scale * a.max(LOG_FLOOR).ln();
                    }
                });
            }
            Op::Row(a, i) => {
                let cols = g.len();
                acc(*a, &mut |s| add_into(&mut s[i * cols..(i + 1) * cols], g, 1.0));
            }
            Op::WeightedSum { weights, terms } => {
                let w = val(*weights);
                let gw: Vec<f64> = terms
                    .iter()
                    .map(|t| match t {
                        Some(t) => val(*t).iter().zip(g).map(|(x, g)| x * g).sum(),
                        None => 0.0,
                    })
                    .collect();
                acc(*weights, &mut |s| add_into(s, &gw, 1.0));
                for (o, t) in terms.iter().enumerate() {
                    if let Some(t) = t {
                        acc(*t, &mut |s| add_into(s, g, w[o]));
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let so = node.value.shape();
                let (n, total_c, hw) = (so[0], so[1], so[2] * so[3]);
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    acc(*p, &mut |s| {
                        for ni in 0..n {
                            let src = &g[(ni * total_c + offset) * hw..(ni * total_c + offset + c) * hw];
                            add_into(&mut s[ni * c * hw..(ni + 1) * c * hw], src, 1.0);
                        }
                    });
                    offset += c;
                }
            }
            Op::AbsMaxNormalize { a, scales, argmax } => {
                let va = val(*a);
                let per = if scales.is_empty() { 0 } else { va.len() / scales.len() };
                acc(*a, &mut |s| {
                    for (ex, (&m, am)) in scales.iter().zip(argmax).enumerate() {
                        let range = ex * per..(ex + 1) * per;
                        let (x, gx) = (&va[range.clone()], &g[range.clone()]);
                        let sx = &mut s[range];
                        for i in 0..per {
                            sx[i] += gx[i] * sign(x[i]) / m;
                        }
                        if let Some(k) = am {
                            let coupling: f64 = gx.iter().zip(x).map(|(g, x)| g * x.abs()).sum();
                            sx[*k] -= sign(x[*k]) * coupling / (m * m);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}
