use rand::Rng;

use super::kernels::{self, Conv2dSpec, ConvGeometry};
use super::Tensor;
use crate::error::{BiteError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Discriminant of every recorded operation. Used for diagnostics and for
/// fault injection in the verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MatMul,
    Add,
    Mul,
    ScaleBy,
    Affine,
    AddBias,
    Sigmoid,
    Elu,
    FlipLastAxis,
    ConcatChannels,
    SliceChannels,
    AvgPoolLastAxis,
    BatchNorm,
    Dropout,
    SoftmaxLastAxis,
    CrossEntropy,
    Sum,
    MeanLastAxis,
    SelectLast,
    Reshape,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<OpKind> {
        use OpKind::*;
        Some(match name {
            "conv2d" => Conv2d,
            "matmul" => MatMul,
            "add" => Add,
            "mul" => Mul,
            "scale-by" => ScaleBy,
            "affine" => Affine,
            "add-bias" => AddBias,
            "sigmoid" => Sigmoid,
            "elu" => Elu,
            "flip-last-axis" => FlipLastAxis,
            "concat-channels" => ConcatChannels,
            "slice-channels" => SliceChannels,
            "avg-pool-last-axis" => AvgPoolLastAxis,
            "batch-norm" => BatchNorm,
            "dropout" => Dropout,
            "softmax-last-axis" => SoftmaxLastAxis,
            "cross-entropy" => CrossEntropy,
            "sum" => Sum,
            "mean-last-axis" => MeanLastAxis,
            "select-last" => SelectLast,
            "reshape" => Reshape,
            _ => return None,
        })
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, geo: ConvGeometry },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleBy { x: Var, s: Var },
    Affine { x: Var, scale: f64 },
    AddBias { x: Var, b: Var },
    Sigmoid { x: Var },
    Elu { x: Var },
    FlipLastAxis { x: Var },
    ConcatChannels { xs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    AvgPoolLastAxis { x: Var, factor: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Dropout { x: Var, mask: Vec<f64> },
    SoftmaxLastAxis { x: Var },
    CrossEntropy { x: Var, labels: Vec<usize> },
    Sum { x: Var },
    MeanLastAxis { x: Var },
    SelectLast { x: Var },
    Reshape { x: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::Affine { .. } => OpKind::Affine,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Elu { .. } => OpKind::Elu,
            Op::FlipLastAxis { .. } => OpKind::FlipLastAxis,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::AvgPoolLastAxis { .. } => OpKind::AvgPoolLastAxis,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::SoftmaxLastAxis { .. } => OpKind::SoftmaxLastAxis,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::MeanLastAxis { .. } => OpKind::MeanLastAxis,
            Op::SelectLast { .. } => OpKind::SelectLast,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the convention used for running estimates.
    pub var: Vec<f64>,
}

/// An append-only tape of operations.
///
/// Nodes are stored in execution order, which is also a topological order,
/// so [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `kind` is deliberately wrong. Only
    /// meant for exercising the gradient checker.
    pub fn with_fault(kind: OpKind) -> Self {
        Self { nodes: Vec::new(), fault: Some(kind) }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, zeros if nothing has flowed into `v` yet.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ------------------------------------------------------------------
    // forward operations

    pub fn conv2d(&mut self, x: Var, w: Var, spec: &Conv2dSpec) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), spec)?;
        let out = kernels::conv2d_forward(&geo, self.value(x), self.value(w));
        Ok(self.push_op(out, &[x, w], Op::Conv2d { x, w, geo }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let out = kernels::matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_op(out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(out, &[a, b], Op::Add { a, b }))
    }

    /// Hadamard product of two equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(out, &[a, b], Op::Mul { a, b }))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = self.value(x).scale(sv);
        Ok(self.push_op(out, &[x, s], Op::ScaleBy { x, s }))
    }

    /// `scale * x + offset` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + offset);
        self.push_op(out, &[x], Op::Affine { x, scale })
    }

    /// Adds `b[c]` to every element of channel `c` (axis 1) of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(BiteError::shape(format!(
                "bias {bs:?} does not match channel axis of {xs:?}"
            )));
        }
        let (ch, inner) = channel_layout(xs);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % ch];
        }
        Ok(self.push_op(out, &[x, b], Op::AddBias { x, b }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push_op(out, &[x], Op::Sigmoid { x })
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push_op(out, &[x], Op::Elu { x })
    }

    pub fn flip_last_axis(&mut self, x: Var) -> Var {
        let out = flip_last(self.value(x));
        self.push_op(out, &[x], Op::FlipLastAxis { x })
    }

    /// Concatenates along axis 1. All other dimensions must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| BiteError::shape("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(BiteError::shape(format!("concat needs rank >= 2, got {base:?}")));
        }
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(BiteError::shape(format!(
                    "concat on mismatched non-channel dims: {base:?} vs {s:?}"
                )));
            }
            channels += s[1];
        }
        let batch = base[0];
        let inner: usize = base[2..].iter().product();
        let mut data = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push_op(out, xs, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    /// Channels `start..start + len` of axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(BiteError::shape(format!(
                "channel slice {start}..{} out of range for {s:?}",
                start + len
            )));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for b in 0..s[0] {
            let off = (b * s[1] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push_op(out, &[x], Op::SliceChannels { x, start }))
    }

    /// Non-overlapping mean pooling over the last axis; a trailing remainder
    /// shorter than `factor` is discarded.
    pub fn avg_pool_last_axis(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(BiteError::config("pooling factor must be >= 1"));
        }
        let s = self.shape(x).to_vec();
        let len = *s.last().ok_or_else(|| BiteError::shape("pooling a 0-d tensor"))?;
        let pooled = len / factor;
        if pooled == 0 {
            return Err(BiteError::shape(format!(
                "pooling factor {factor} exceeds last axis length {len}"
            )));
        }
        let rows = self.value(x).len() / len;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * pooled);
        let inv = 1.0 / factor as f64;
        for r in 0..rows {
            let row = &src[r * len..(r + 1) * len];
            data.extend(row.chunks_exact(factor).take(pooled).map(|c| c.iter().sum::<f64>() * inv));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = pooled;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push_op(out, &[x], Op::AvgPoolLastAxis { x, factor }))
    }

    /// Batch normalization over every axis except axis 1.
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can update its running estimates; in evaluation mode the given
    /// running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(BiteError::shape(format!("batch norm needs rank >= 2, got {s:?}")));
        }
        let (ch, inner) = channel_layout(&s);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [ch] {
                return Err(BiteError::shape(format!(
                    "batch norm {name} {:?} does not match {ch} channels",
                    self.shape(v)
                )));
            }
        }
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(BiteError::shape("batch norm running statistics length mismatch"));
        }
        let xv = self.value(x).data();
        let count = xv.len() / ch;
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for (i, &v) in xv.iter().enumerate() {
                    mean[(i / inner) % ch] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for (i, &v) in xv.iter().enumerate() {
                    let c = (i / inner) % ch;
                    var[c] += (v - mean[c]).powi(2);
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1 { v / (count - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= count as f64);
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            let c = (i / inner) % ch;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(g[c] * h + bt[c]);
        }
        let out = Tensor::from_parts(s, out);
        let var_node = self.push_op(
            out,
            &[x, gamma, beta],
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: mode == Mode::Train },
        );
        Ok((var_node, stats))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so the
    /// evaluation path is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(BiteError::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        Ok(self.push_op(out, &[x], Op::Dropout { x, mask }))
    }

    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let len = *t.shape().last().ok_or_else(|| BiteError::shape("softmax of a 0-d tensor"))?;
        let mut data = t.data().to_vec();
        data.chunks_exact_mut(len).for_each(softmax_in_place);
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push_op(out, &[x], Op::SoftmaxLastAxis { x }))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`),
    /// evaluated with log-sum-exp stabilization.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(BiteError::shape(format!(
                "cross entropy expects [B, K] logits for {} labels, got {s:?}",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(BiteError::config(format!("label {bad} out of range for {k} classes")));
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (row, &label) in data.chunks_exact(k).zip(labels) {
            total += log_sum_exp(row) - row[label];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push_op(out, &[logits], Op::CrossEntropy { x: logits, labels: labels.to_vec() }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, &[x], Op::Sum { x })
    }

    /// Mean over the last axis, which is removed.
    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(BiteError::shape(format!("mean_last_axis needs rank >= 2, got {s:?}")));
        }
        let len = s[s.len() - 1];
        let data = self
            .value(x)
            .data()
            .chunks_exact(len)
            .map(|c| c.iter().sum::<f64>() / len as f64)
            .collect();
        let out = Tensor::from_parts(s[..s.len() - 1].to_vec(), data);
        Ok(self.push_op(out, &[x], Op::MeanLastAxis { x }))
    }

    /// The final element of the last axis, which is removed.
    pub fn select_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(BiteError::shape(format!("select_last needs rank >= 2, got {s:?}")));
        }
        let len = s[s.len() - 1];
        let data = self.value(x).data().chunks_exact(len).map(|c| c[len - 1]).collect();
        let out = Tensor::from_parts(s[..s.len() - 1].to_vec(), data);
        Ok(self.push_op(out, &[x], Op::SelectLast { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push_op(out, &[x], Op::Reshape { x }))
    }

    // ------------------------------------------------------------------
    // reverse sweep

    /// Accumulates d`loss`/d(node) into every node that requires gradients.
    /// Repeated calls add to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(BiteError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let faulty = self.fault == Some(self.nodes[i].op.kind());
            for (input, mut contribution) in self.local_grads(i, &g) {
                if faulty {
                    contribution = contribution.scale(1.5);
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` with respect to each input that
    /// requires a gradient.
    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geo } => {
                if rg(*x) {
                    out.push((*x, kernels::conv2d_backward_input(geo, g, val(*w))));
                }
                if rg(*w) {
                    out.push((*w, kernels::conv2d_backward_weight(geo, g, val(*x))));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if rg(*a) {
                    let bt = kernels::transpose(val(*b).data(), *k, *n);
                    out.push((*a, kernels::matmul_raw(g.data(), &bt, *m, *n, *k)));
                }
                if rg(*b) {
                    let at = kernels::transpose(val(*a).data(), *m, *k);
                    out.push((*b, kernels::matmul_raw(&at, g.data(), *k, *m, *n)));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    out.push((*a, g.zip_with(val(*b), |x, y| x * y).unwrap()));
                }
                if rg(*b) {
                    out.push((*b, g.zip_with(val(*a), |x, y| x * y).unwrap()));
                }
            }
            Op::ScaleBy { x, s } => {
                if rg(*x) {
                    out.push((*x, g.scale(val(*s).data()[0])));
                }
                if rg(*s) {
                    let dot: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    out.push((*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![dot])));
                }
            }
            Op::Affine { x, scale } => out.push((*x, g.scale(*scale))),
            Op::AddBias { x, b } => {
                if rg(*x) {
                    out.push((*x, g.clone()));
                }
                if rg(*b) {
                    let (ch, inner) = channel_layout(g.shape());
                    let mut gb = vec![0.0; ch];
                    for (i, &v) in g.data().iter().enumerate() {
                        gb[(i / inner) % ch] += v;
                    }
                    out.push((*b, Tensor::from_parts(vec![ch], gb)));
                }
            }
            Op::Sigmoid { x } => {
                let d = g.zip_with(&node.value, |gv, y| gv * y * (1.0 - y)).unwrap();
                out.push((*x, d));
            }
            Op::Elu { x } => {
                let d = g
                    .zip_with(val(*x), |gv, xv| if xv > 0.0 { gv } else { gv * xv.exp() })
                    .unwrap();
                out.push((*x, d));
            }
            Op::FlipLastAxis { x } => out.push((*x, flip_last(g))),
            Op::ConcatChannels { xs } => {
                let shape = g.shape();
                let inner: usize = shape[2..].iter().product();
                let total = shape[1] * inner;
                let mut offset = 0;
                for &v in xs {
                    let vs = val(v).shape();
                    let block = vs[1] * inner;
                    if rg(v) {
                        let mut data = Vec::with_capacity(val(v).len());
                        for b in 0..shape[0] {
                            let start = b * total + offset;
                            data.extend_from_slice(&g.data()[start..start + block]);
                        }
                        out.push((v, Tensor::from_parts(vs.to_vec(), data)));
                    }
                    offset += block;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = val(*x).shape();
                let inner: usize = xs[2..].iter().product();
                let len = g.shape()[1];
                let mut d = vec![0.0; val(*x).len()];
                for b in 0..xs[0] {
                    let dst = (b * xs[1] + start) * inner;
                    let src = b * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out.push((*x, Tensor::from_parts(xs.to_vec(), d)));
            }
            Op::AvgPoolLastAxis { x, factor } => {
                let xs = val(*x).shape();
                let len = xs[xs.len() - 1];
                let pooled = g.shape()[g.ndim() - 1];
                let inv = 1.0 / *factor as f64;
                let mut d = vec![0.0; val(*x).len()];
                for (r, grow) in g.data().chunks_exact(pooled).enumerate() {
                    for (p, &gv) in grow.iter().enumerate() {
                        let base = r * len + p * factor;
                        d[base..base + factor].iter_mut().for_each(|v| *v = gv * inv);
                    }
                }
                out.push((*x, Tensor::from_parts(xs.to_vec(), d)));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (ch, inner) = channel_layout(g.shape());
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for (i, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                    let c = (i / inner) % ch;
                    sum_g[c] += gv;
                    sum_gx[c] += gv * h;
                }
                if rg(*x) {
                    let gm = val(*gamma).data();
                    let count = (g.len() / ch) as f64;
                    let d = g
                        .data()
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&gv, &h))| {
                            let c = (i / inner) % ch;
                            if *train {
                                gm[c] * inv_std[c] * (gv - sum_g[c] / count - h * sum_gx[c] / count)
                            } else {
                                gm[c] * inv_std[c] * gv
                            }
                        })
                        .collect();
                    out.push((*x, Tensor::from_parts(g.shape().to_vec(), d)));
                }
                if rg(*gamma) {
                    out.push((*gamma, Tensor::from_parts(vec![ch], sum_gx)));
                }
                if rg(*beta) {
                    out.push((*beta, Tensor::from_parts(vec![ch], sum_g)));
                }
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), d)));
            }
            Op::SoftmaxLastAxis { x } => {
                let len = g.shape()[g.ndim() - 1];
                let mut d = Vec::with_capacity(g.len());
                for (grow, yrow) in g.data().chunks_exact(len).zip(node.value.data().chunks_exact(len)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    d.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
                }
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), d)));
            }
            Op::CrossEntropy { x, labels } => {
                let logits = val(*x);
                let k = logits.shape()[1];
                let scale = g.data()[0] / labels.len() as f64;
                let mut d = logits.data().to_vec();
                for (row, &label) in d.chunks_exact_mut(k).zip(labels) {
                    softmax_in_place(row);
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*x, Tensor::from_parts(logits.shape().to_vec(), d)));
            }
            Op::Sum { x } => out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]))),
            Op::MeanLastAxis { x } => {
                let xs = val(*x).shape();
                let len = xs[xs.len() - 1];
                let inv = 1.0 / len as f64;
                let d = g.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, len)).collect();
                out.push((*x, Tensor::from_parts(xs.to_vec(), d)));
            }
            Op::SelectLast { x } => {
                let xs = val(*x).shape();
                let len = xs[xs.len() - 1];
                let mut d = vec![0.0; val(*x).len()];
                for (r, &v) in g.data().iter().enumerate() {
                    d[r * len + len - 1] = v;
                }
                out.push((*x, Tensor::from_parts(xs.to_vec(), d)));
            }
            Op::Reshape { x } => {
                out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec())));
            }
        }
        out
    }
}

/// `(channels, elements per channel block)` for a tensor laid out as
/// `[B, C, ...]`.
fn channel_layout(shape: &[usize]) -> (usize, usize) {
    (shape[1], shape[2..].iter().product())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn flip_last(t: &Tensor) -> Tensor {
    let len = t.shape()[t.ndim() - 1];
    let mut data = t.data().to_vec();
    data.chunks_exact_mut(len).for_each(|c| c.reverse());
    Tensor::from_parts(t.shape().to_vec(), data)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
