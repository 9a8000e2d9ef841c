//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! pushes one node holding its output, and remembers its inputs; since a node
//! can only reference nodes that already exist, insertion order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters enter through [`Graph::param`]. The graph keeps one leaf per
//! [`ParamId`], so a parameter used several times in one forward pass (shared
//! projection network, tied encoder copies) sums its gradient contributions
//! on that leaf. [`Gradients::accumulate_into`] then adds (never overwrites)
//! the leaf gradients onto the parameters' `grad` buffers.
//!
//! All normalizations use the population (biased) variance.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, Parameter};
use crate::tensor::Tensor;

/// `sqrt(2/pi)` in the tanh approximation of GELU.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh approximation of GELU.
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Pointwise maps.
///
/// `Gelu` is the tanh approximation
/// `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Gelu,
    Exp,
    Log,
    Sqrt,
    Neg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
        pairs: Vec<(usize, usize)>,
    },
    Binary(BinaryKind, NodeId, NodeId),
    AddBias(NodeId, NodeId),
    MulBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Unary(UnaryKind, NodeId),
    Softmax(NodeId),
    MaskedSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SelectPosition {
        x: NodeId,
        pos: usize,
    },
    MaskedMean {
        x: NodeId,
        weights: Vec<f64>,
    },
    RedundancyLoss {
        m: NodeId,
        lambda: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Binary(_, a, b) | Op::AddBias(a, b) | Op::MulBias(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Scale(x, _)
            | Op::Unary(_, x)
            | Op::Softmax(x)
            | Op::MaskedSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Permute(x, _) => vec![*x],
            Op::BatchNorm { x, .. }
            | Op::SelectPosition { x, .. }
            | Op::MaskedMean { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::Gather { table, .. } => vec![*table],
            Op::RedundancyLoss { m, .. } => vec![*m],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Leaf for a trainable parameter; repeated calls with the same
    /// parameter return the same node.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        if let Some(&id) = self.params.get(&p.id()) {
            return id;
        }
        let id = self.leaf(p.value.clone(), true);
        self.params.insert(p.id(), id);
        id
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    /// Same value, no gradient path back to `x`.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    // ----- linear algebra -------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n] → [.., m, n]` with
    /// numpy-style broadcasting of the leading dimensions.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (batch, pairs) = broadcast_batch(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; pairs.len() * m * n];
        for (t, &(ia, ib)) in pairs.iter().enumerate() {
            matmul_kernel(
                &av[ia * m * k..(ia + 1) * m * k],
                &bv[ib * k * n..(ib + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                pairs,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", &shape, axes));
        }
        let value = permute_tensor(self.value(x), axes);
        Ok(self.push(value, Op::Permute(x, axes.to_vec())))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    // ----- elementwise ----------------------------------------------------

    pub fn elementwise(&mut self, a: NodeId, b: NodeId, kind: BinaryKind) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("elementwise", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    /// `x[.., d] + bias[d]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = self.broadcast_last(x, bias, "add_bias", |a, b| a + b)?;
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    /// `x[.., d] * gain[d]`.
    pub fn mul_bias(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let value = self.broadcast_last(x, gain, "mul_bias", |a, b| a * b)?;
        Ok(self.push(value, Op::MulBias(x, gain)))
    }

    fn broadcast_last(
        &self,
        x: NodeId,
        v: NodeId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (vx, vv) = (self.value(x), self.value(v));
        let d = vx.last_dim();
        if vv.shape() != [d] || vx.rank() == 0 {
            return Err(Error::shape(op, vx.shape(), vv.shape()));
        }
        let bias = vv.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, bias[i % d]))
            .collect();
        Tensor::new(vx.shape().to_vec(), data)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn unary(&mut self, x: NodeId, kind: UnaryKind) -> Result<NodeId> {
        let vx = self.value(x);
        let op = match kind {
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            _ => "",
        };
        match kind {
            UnaryKind::Log => {
                if let Some(bad) = vx.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::NumericDomain {
                        op,
                        detail: format!("input {bad} is not positive"),
                    });
                }
            }
            UnaryKind::Sqrt => {
                if let Some(bad) = vx.data().iter().find(|v| !(**v >= 0.0)) {
                    return Err(Error::NumericDomain {
                        op,
                        detail: format!("input {bad} is negative"),
                    });
                }
            }
            _ => {}
        }
        let value = vx.map(|v| unary_forward(kind, v));
        Ok(self.push(value, Op::Unary(kind, x)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Relu).expect("relu has no domain restriction")
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Gelu).expect("gelu has no domain restriction")
    }

    // ----- normalizations -------------------------------------------------

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() == 0 {
            return Err(Error::shape("softmax_rows", vx.shape(), &[]));
        }
        let mut out = vx.clone();
        let d = vx.last_dim();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row, None);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Softmax over the last axis where key positions with `key_mask == false`
    /// get weight exactly zero. `x` is viewed as `[batch, rows_per_batch, k]`
    /// and `key_mask` as `[batch, k]`.
    pub fn masked_softmax_rows(&mut self, x: NodeId, key_mask: &[bool]) -> Result<NodeId> {
        let vx = self.value(x);
        let k = vx.last_dim();
        let rows = vx.rows();
        if vx.rank() == 0 || k == 0 || key_mask.len() % k != 0 {
            return Err(Error::shape("masked_softmax_rows", vx.shape(), &[key_mask.len()]));
        }
        let batch = key_mask.len() / k;
        if batch == 0 || rows % batch != 0 {
            return Err(Error::shape("masked_softmax_rows", vx.shape(), &[batch, k]));
        }
        let per_batch = rows / batch;
        let mut out = vx.clone();
        for (r, row) in out.data_mut().chunks_mut(k).enumerate() {
            let b = r / per_batch;
            softmax_in_place(row, Some(&key_mask[b * k..(b + 1) * k]));
        }
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    /// Normalizes each position over the last axis, then applies
    /// `gain[d]` and `bias[d]`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if vx.rank() == 0 || d == 0 {
            return Err(Error::shape("layer_norm", vx.shape(), &[]));
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", vx.shape(), self.shape(p)));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Per-feature normalization of `[batch, d]` across the batch, no affine
    /// transform. Requires `batch >= 2`.
    pub fn batch_norm_features(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::shape("batch_norm_features", vx.shape(), &[]));
        }
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        if n < 2 {
            return Err(Error::Config(format!(
                "batch normalization needs at least 2 rows in training mode, got {n}"
            )));
        }
        let (mean, var) = column_moments(vx);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = vx.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = (src[i * d + j] - mean[j]) * inv_std[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::BatchNorm { x, inv_std }))
    }

    // ----- losses and reductions -----------------------------------------

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let c = vl.shape()[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::IndexOutOfRange {
                what: "cross_entropy target class",
                index: t,
                size: c,
            });
        }
        let mut total = 0.0;
        for (row, &t) in vl.data().chunks(c).zip(targets) {
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over all `batch × k` entries of the numerically stable
    /// `max(x, 0) − x·t + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.shape() != targets.shape() || vl.is_empty() {
            return Err(Error::shape("bce_with_logits", vl.shape(), targets.shape()));
        }
        if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Validation(format!(
                "binary cross-entropy target {bad} is not 0 or 1"
            )));
        }
        let total: f64 = vl
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / vl.len() as f64);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        self.push(value, Op::Mean(x))
    }

    /// `Σ_m (1 − M_mm)² + λ·Σ_{m≠n} M_mn²` for a square `M`.
    pub fn redundancy_loss(&mut self, m: NodeId, lambda: f64) -> Result<NodeId> {
        let vm = self.value(m);
        let (inv, off) = redundancy_terms(vm)?;
        let value = Tensor::scalar(inv + lambda * off);
        Ok(self.push(value, Op::RedundancyLoss { m, lambda }))
    }

    // ----- indexing -------------------------------------------------------

    /// Row lookup: `table[v, d]` indexed by `ids` laid out as `prefix`,
    /// giving `prefix + [d]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize], prefix: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.rank() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather_rows", vt.shape(), prefix));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(vt.row(id));
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `x[:, pos, :]` of a `[batch, seq, d]` tensor.
    pub fn select_position(&mut self, x: NodeId, pos: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 3 {
            return Err(Error::shape("select_position", vx.shape(), &[]));
        }
        let (b, s, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        if pos >= s {
            return Err(Error::IndexOutOfRange {
                what: "sequence",
                index: pos,
                size: s,
            });
        }
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            let start = (i * s + pos) * d;
            out.extend_from_slice(&vx.data()[start..start + d]);
        }
        let value = Tensor::new(vec![b, d], out)?;
        Ok(self.push(value, Op::SelectPosition { x, pos }))
    }

    /// Mask-weighted mean over the sequence axis of `[batch, seq, d]`.
    pub fn masked_mean(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 3 || mask.len() != vx.shape()[0] * vx.shape()[1] {
            return Err(Error::shape("masked_mean", vx.shape(), &[mask.len()]));
        }
        let (b, s, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut weights = vec![0.0; b * s];
        for i in 0..b {
            let count = mask[i * s..(i + 1) * s].iter().filter(|m| **m).count();
            if count == 0 {
                return Err(Error::Validation(format!(
                    "row {i} has no real tokens to pool"
                )));
            }
            for t in 0..s {
                if mask[i * s + t] {
                    weights[i * s + t] = 1.0 / count as f64;
                }
            }
        }
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for t in 0..s {
                let w = weights[i * s + t];
                if w == 0.0 {
                    continue;
                }
                let src = &vx.data()[(i * s + t) * d..(i * s + t + 1) * d];
                for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        Ok(self.push(value, Op::MaskedMean { x, weights }))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every node that requires a
    /// gradient and is reachable from `loss` receives one; others stay
    /// `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                pairs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                if needs(*a) {
                    let mut da = vec![0.0; av.len()];
                    for (t, &(ia, ib)) in pairs.iter().enumerate() {
                        let gc = &gd[t * m * n..(t + 1) * m * n];
                        let bm = &bv.data()[ib * k * n..(ib + 1) * k * n];
                        let dst = &mut da[ia * m * k..(ia + 1) * m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += gc[i * n + j] * bm[p * n + j];
                                }
                                dst[i * k + p] += acc;
                            }
                        }
                    }
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?)?;
                }
                if needs(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for (t, &(ia, ib)) in pairs.iter().enumerate() {
                        let gc = &gd[t * m * n..(t + 1) * m * n];
                        let am = &av.data()[ia * m * k..(ia + 1) * m * k];
                        let dst = &mut db[ib * k * n..(ib + 1) * k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = am[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    dst[p * n + j] += aip * gc[i * n + j];
                                }
                            }
                        }
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?)?;
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb) = match kind {
                    BinaryKind::Add => (g.clone(), g.clone()),
                    BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryKind::Mul => (
                        zip_map(g, bv, |x, y| x * y),
                        zip_map(g, av, |x, y| x * y),
                    ),
                };
                if needs(*a) {
                    accumulate(grads, *a, ga)?;
                }
                if needs(*b) {
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::AddBias(x, bias) => {
                if needs(*x) {
                    accumulate(grads, *x, g.clone())?;
                }
                if needs(*bias) {
                    let d = self.value(*bias).len();
                    accumulate(grads, *bias, Tensor::new(vec![d], column_sums(gd, d))?)?;
                }
            }
            Op::MulBias(x, gain) => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = gv.len();
                if needs(*x) {
                    let data = gd
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * gv.data()[i % d])
                        .collect();
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                if needs(*gain) {
                    let prod: Vec<f64> = gd.iter().zip(xv.data()).map(|(a, b)| a * b).collect();
                    accumulate(grads, *gain, Tensor::new(vec![d], column_sums(&prod, d))?)?;
                }
            }
            Op::Scale(x, f) => {
                if needs(*x) {
                    accumulate(grads, *x, g.map(|v| v * f))?;
                }
            }
            Op::Unary(kind, x) => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let yv = &node.value;
                    let data = gd
                        .iter()
                        .zip(xv.data())
                        .zip(yv.data())
                        .map(|((gi, &xi), &yi)| gi * unary_derivative(*kind, xi, yi))
                        .collect();
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                if needs(*x) {
                    let y = &node.value;
                    let d = y.last_dim();
                    let mut dx = vec![0.0; y.len()];
                    for ((dst, yr), gr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(gd.chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if needs(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, ((dst, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(gd.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dst[j] = scale * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?)?;
                }
                if needs(*gain) {
                    let prod: Vec<f64> = gd.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    accumulate(grads, *gain, Tensor::new(vec![d], column_sums(&prod, d))?)?;
                }
                if needs(*bias) {
                    accumulate(grads, *bias, Tensor::new(vec![d], column_sums(gd, d))?)?;
                }
            }
            Op::BatchNorm { x, inv_std } => {
                if needs(*x) {
                    let y = node.value.data();
                    let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                    let sum_g = column_sums(gd, d);
                    let prod: Vec<f64> = gd.iter().zip(y).map(|(a, b)| a * b).collect();
                    let sum_gy = column_sums(&prod, d);
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            let idx = i * d + j;
                            dx[idx] = inv_std[j] / n as f64
                                * (n as f64 * gd[idx] - sum_g[j] - y[idx] * sum_gy[j]);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![n, d], dx)?)?;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if needs(*logits) {
                    let lv = self.value(*logits);
                    let c = lv.last_dim();
                    let scale = gd[0] / targets.len() as f64;
                    let mut dx = vec![0.0; lv.len()];
                    for ((dst, row), &t) in dx.chunks_mut(c).zip(lv.data().chunks(c)).zip(targets) {
                        dst.copy_from_slice(row);
                        softmax_in_place(dst, None);
                        dst[t] -= 1.0;
                        dst.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dx)?)?;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if needs(*logits) {
                    let lv = self.value(*logits);
                    let scale = gd[0] / lv.len() as f64;
                    let data = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&x, &t)| (sigmoid(x) - t) * scale)
                        .collect();
                    accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), data)?)?;
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]))?;
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = self.value(*x).len().max(1) as f64;
                    accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0] / n))?;
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    accumulate(grads, *x, g.reshape(self.shape(*x))?)?;
                }
            }
            Op::Permute(x, axes) => {
                if needs(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    accumulate(grads, *x, permute_tensor(g, &inverse))?;
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let tv = self.value(*table);
                    let d = tv.last_dim();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += gd[r * d + j];
                        }
                    }
                    accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?)?;
                }
            }
            Op::SelectPosition { x, pos } => {
                if needs(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (b, s, d) = (shape[0], shape[1], shape[2]);
                    let mut dx = vec![0.0; b * s * d];
                    for i in 0..b {
                        let start = (i * s + pos) * d;
                        dx[start..start + d].copy_from_slice(&gd[i * d..(i + 1) * d]);
                    }
                    accumulate(grads, *x, Tensor::new(shape, dx)?)?;
                }
            }
            Op::MaskedMean { x, weights } => {
                if needs(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (b, s, d) = (shape[0], shape[1], shape[2]);
                    let mut dx = vec![0.0; b * s * d];
                    for i in 0..b {
                        for t in 0..s {
                            let w = weights[i * s + t];
                            if w == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                dx[(i * s + t) * d + j] = w * gd[i * d + j];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(shape, dx)?)?;
                }
            }
            Op::RedundancyLoss { m, lambda } => {
                if needs(*m) {
                    let mv = self.value(*m);
                    let p = mv.shape()[0];
                    let mut dm = vec![0.0; p * p];
                    for i in 0..p {
                        for j in 0..p {
                            let v = mv.data()[i * p + j];
                            dm[i * p + j] = gd[0]
                                * if i == j {
                                    -2.0 * (1.0 - v)
                                } else {
                                    2.0 * lambda * v
                                };
                        }
                    }
                    accumulate(grads, *m, Tensor::new(vec![p, p], dm)?)?;
                }
            }
        }
        Ok(())
    }
}

/// Output of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn for_param(&self, graph: &Graph, p: &Parameter) -> Option<&Tensor> {
        graph.param_node(p.id()).and_then(|id| self.get(id))
    }

    /// Adds each parameter's leaf gradient onto `p.grad`. Parameters that
    /// did not take part in the graph are left untouched.
    pub fn accumulate_into<'a>(
        &self,
        graph: &Graph,
        params: impl IntoIterator<Item = &'a mut Parameter>,
    ) -> Result<()> {
        for p in params {
            if let Some(g) = self.for_param(graph, p) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

// ----- helpers -------------------------------------------------------------

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums(data: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for row in data.chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Per-column mean and population variance of a `[n, d]` tensor.
pub(crate) fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = column_sums(x.data(), d);
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

/// Invariance term `Σ (1 − M_mm)²` and redundancy term `Σ_{m≠n} M_mn²`.
pub(crate) fn redundancy_terms(m: &Tensor) -> Result<(f64, f64)> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(Error::shape("redundancy_loss", m.shape(), &[]));
    }
    let p = m.shape()[0];
    let mut inv = 0.0;
    let mut off = 0.0;
    for i in 0..p {
        for j in 0..p {
            let v = m.data()[i * p + j];
            if i == j {
                inv += (1.0 - v) * (1.0 - v);
            } else {
                off += v * v;
            }
        }
    }
    Ok((inv, off))
}

fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Broadcast two batch shapes; returns the output batch shape and, for each
/// output batch entry, the flat batch index into each operand.
fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(r);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => out.push(x),
            (1, _) => out.push(y),
            (_, 1) => out.push(x),
            _ => return None,
        }
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; r];
        let mut acc = 1;
        for i in (0..r).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total: usize = out.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0; r];
    for _ in 0..total {
        let ia = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((ia, ib));
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, pairs))
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let r = shape.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0; r];
    let src = x.data();
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut total = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Gelu => {
            let t = (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        }
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Neg => -x,
    }
}

fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Gelu => {
            let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            let t = u.tanh();
            let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Sqrt => 0.5 / y,
        UnaryKind::Neg => -1.0,
    }
}
