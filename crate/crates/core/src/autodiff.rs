//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Expression graphs are built eagerly: each op computes its value when
//! recorded, checks the result for non-finite entries (NaN/Inf propagation is
//! an error, not a silent state), and appends a node. `backward` replays the
//! tape in reverse creation order, which is a stable topological order, so
//! gradient accumulation is deterministic.
//!
//! The primitive set is intentionally small: elementwise arithmetic, matrix
//! products, row softmaxes (optionally masked), layer normalization, gathers
//! and slices, plus the two lattice losses which carry their own analytic
//! backward rules.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::lattice::{self, DistillMode, LatticeTensor};
use crate::params::ParameterStore;
use crate::tensor::{
    matmul_acc, matmul_transpose_a_acc, matmul_transpose_b_acc, Tensor,
};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Boolean attention mask over an m x n score matrix; `true` = attend.
pub type AttentionMask = Rc<Vec<bool>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddBiasRow { a: NodeId, bias: NodeId },
    MatMul { a: NodeId, b: NodeId },
    /// a @ b^T with b stored row-major as [n, k].
    MatMulTransposeB { a: NodeId, b: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Relu { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    /// Masked positions were zeroed during the forward pass, so the
    /// backward rule needs only the output values.
    SoftmaxRows { a: NodeId },
    LogSumExpRows { a: NodeId },
    SumAll { a: NodeId },
    LayerNormRows { a: NodeId, gain: NodeId, bias: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    SliceRows { a: NodeId, start: usize, len: usize },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatRows { parts: Vec<NodeId> },
    /// out[i*n+j, :] = a[i, :] + b[j, :]
    OuterAddRows { a: NodeId, b: NodeId },
    /// Stack groups of `factor` consecutive rows into one wider row,
    /// zero-padding the tail group.
    StackFrames { a: NodeId, factor: usize },
    /// Per-channel 1-D convolution; causal = left padding only.
    DepthwiseConv { a: NodeId, kernel: NodeId, causal: bool },
    /// Transducer negative log-likelihood of `labels` given pre-softmax
    /// logits laid out as (frames * (labels+1)) x vocab.
    RnntLoss { logits: NodeId, labels: Vec<usize>, frames: usize },
    /// Lattice KL from a teacher distribution (held constant) to the
    /// student; gradient flows to the student logits only.
    LatticeKl {
        teacher: NodeId,
        student: NodeId,
        labels: Vec<usize>,
        frames: usize,
        mode: DistillMode,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddBiasRow { .. } => "add_bias_row",
            Op::MatMul { .. } => "matmul",
            Op::MatMulTransposeB { .. } => "matmul_transpose_b",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::LogSoftmaxRows { .. } => "log_softmax_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LogSumExpRows { .. } => "logsumexp_rows",
            Op::SumAll { .. } => "sum_all",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::OuterAddRows { .. } => "outer_add_rows",
            Op::StackFrames { .. } => "stack_frames",
            Op::DepthwiseConv { .. } => "depthwise_conv",
            Op::RnntLoss { .. } => "rnnt_loss",
            Op::LatticeKl { .. } => "lattice_kl",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Per-parameter gradients keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: std::collections::BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Ensure every parameter of `store` has an entry, zero-filled when no
    /// gradient reached it.
    pub fn complete_for(mut self, store: &ParameterStore) -> Self {
        for (name, tensor) in store.iter() {
            self.by_name
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(tensor.shape().to_vec()));
        }
        self
    }
}

/// Reverse-mode tape bound to one parameter store.
///
/// Requesting the same parameter twice yields the same node, so weight
/// sharing between graph branches (the two encoder modes, for instance)
/// accumulates gradients on a single leaf.
pub struct Tape<'p> {
    store: &'p ParameterStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<String, NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParameterStore) -> Self {
        Tape { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: format!("{}#{}", op.name(), self.nodes.len()) });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, requires_grad });
        Ok(id)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Register a named parameter from the bound store (memoized).
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let id = self.push(Op::Leaf, value, true)?;
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register a constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::usage(format!(
                "add shape mismatch: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::Add { a, b }, value, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::usage(format!(
                "mul shape mismatch: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::Mul { a, b }, value, rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::Scale { a, factor }, value, rg)
    }

    /// Broadcast-add a length-n bias vector to every row of an m x n matrix.
    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        let n = va.cols();
        if vb.numel() != n {
            return Err(Error::usage(format!(
                "bias length {} does not match row width {n}",
                vb.numel()
            )));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, bias]);
        self.push(Op::AddBiasRow { a, bias }, value, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (kb, n) = (vb.rows(), vb.cols());
        if k != kb {
            return Err(Error::usage(format!(
                "matmul inner dims differ: {k} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::MatMul { a, b }, value, rg)
    }

    pub fn matmul_transpose_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (n, kb) = (vb.rows(), vb.cols());
        if k != kb {
            return Err(Error::usage(format!(
                "matmul_transpose_b inner dims differ: {k} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_transpose_b_acc(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::MatMulTransposeB { a, b }, value, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::Tanh { a }, value, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|x| {
                if *x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::Sigmoid { a }, value, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::Relu { a }, value, rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            crate::tensor::log_softmax_into(va.row(i), &mut data[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::LogSoftmaxRows { a }, value, rg)
    }

    /// Row softmax with an optional attention mask; every row must keep at
    /// least one attendable position.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<AttentionMask>) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        if let Some(mask) = &mask {
            if mask.len() != m * n {
                return Err(Error::usage(format!(
                    "mask length {} does not match {m}x{n} scores",
                    mask.len()
                )));
            }
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = va.row(i);
            let allowed = |j: usize| mask.as_ref().map(|mk| mk[i * n + j]).unwrap_or(true);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::usage(format!("softmax row {i} fully masked")));
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    data[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::SoftmaxRows { a }, value, rg)
    }

    /// Per-row log-sum-exp, producing an m x 1 column.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let m = va.rows();
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            data.push(crate::tensor::logsumexp(va.row(i))?);
        }
        let value = Tensor::new(vec![m, 1], data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::LogSumExpRows { a }, value, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.needs_grad(&[a]);
        self.push(Op::SumAll { a }, Tensor::scalar(total), rg)
    }

    /// Row-wise layer normalization with learned gain and bias vectors.
    pub fn layer_norm_rows(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vg, vb) = (self.value(a), self.value(gain), self.value(bias));
        let (m, n) = (va.rows(), va.cols());
        if vg.numel() != n || vb.numel() != n {
            return Err(Error::usage(format!(
                "layer norm gain/bias length must be {n}"
            )));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = va.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                data[i * n + j] = xhat * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, gain, bias]);
        self.push(Op::LayerNormRows { a, gain, bias }, value, rg)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (r, n) = (vt.rows(), vt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::usage(format!("gather row {bad} out of {r}")));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor::new(vec![ids.len(), n], data)?;
        let rg = self.needs_grad(&[table]);
        self.push(Op::GatherRows { table, ids: ids.to_vec() }, value, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        if len == 0 || start + len > m {
            return Err(Error::usage(format!(
                "row slice [{start}, {}) out of {m} rows",
                start + len
            )));
        }
        let data = va.data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(vec![len, n], data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::SliceRows { a, start, len }, value, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        if len == 0 || start + len > n {
            return Err(Error::usage(format!(
                "col slice [{start}, {}) out of {n} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&va.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::SliceCols { a, start, len }, value, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::usage("concat of zero parts".to_string()));
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::usage(format!(
                    "concat col mismatch: {} vs {n}",
                    v.cols()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, n], data)?;
        let rg = self.needs_grad(parts);
        self.push(Op::ConcatRows { parts: parts.to_vec() }, value, rg)
    }

    /// All-pairs row sum: out[i*n + j, :] = a[i, :] + b[j, :].
    pub fn outer_add_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.cols();
        if vb.cols() != d {
            return Err(Error::usage(format!(
                "outer add width mismatch: {} vs {d}",
                vb.cols()
            )));
        }
        let (m, n) = (va.rows(), vb.rows());
        let mut data = Vec::with_capacity(m * n * d);
        for i in 0..m {
            let ra = va.row(i);
            for j in 0..n {
                let rb = vb.row(j);
                data.extend(ra.iter().zip(rb).map(|(x, y)| x + y));
            }
        }
        let value = Tensor::new(vec![m * n, d], data)?;
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::OuterAddRows { a, b }, value, rg)
    }

    /// Stack `factor` consecutive frames into one row; the tail group is
    /// zero-padded. T x D becomes ceil(T/factor) x (factor * D).
    pub fn stack_frames(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::usage("stack factor must be >= 1".to_string()));
        }
        let va = self.value(a);
        let (t, d) = (va.rows(), va.cols());
        let groups = t.div_ceil(factor);
        let mut data = vec![0.0; groups * factor * d];
        for src in 0..t {
            let g = src / factor;
            let offset = (src % factor) * d;
            data[g * factor * d + offset..g * factor * d + offset + d]
                .copy_from_slice(va.row(src));
        }
        let value = Tensor::new(vec![groups, factor * d], data)?;
        let rg = self.needs_grad(&[a]);
        self.push(Op::StackFrames { a, factor }, value, rg)
    }

    /// Depthwise 1-D convolution over a T x C sequence with a K x C kernel.
    /// Causal mode pads K-1 frames on the left; otherwise padding is
    /// symmetric (K odd).
    pub fn depthwise_conv(&mut self, a: NodeId, kernel: NodeId, causal: bool) -> Result<NodeId> {
        let (va, vk) = (self.value(a), self.value(kernel));
        let (t, c) = (va.rows(), va.cols());
        let k = vk.rows();
        if vk.cols() != c {
            return Err(Error::usage(format!(
                "conv kernel channels {} do not match input {c}",
                vk.cols()
            )));
        }
        if !causal && k % 2 == 0 {
            return Err(Error::usage("symmetric conv needs odd kernel".to_string()));
        }
        let shift = if causal { k as isize - 1 } else { (k as isize - 1) / 2 };
        let mut data = vec![0.0; t * c];
        for out_t in 0..t as isize {
            for j in 0..k as isize {
                let src = out_t - shift + j;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let x = va.row(src as usize);
                let w = vk.row(j as usize);
                let o = &mut data[(out_t as usize) * c..(out_t as usize + 1) * c];
                for ch in 0..c {
                    o[ch] += x[ch] * w[ch];
                }
            }
        }
        let value = Tensor::new(vec![t, c], data)?;
        let rg = self.needs_grad(&[a, kernel]);
        self.push(Op::DepthwiseConv { a, kernel, causal }, value, rg)
    }

    /// Transducer loss over pre-softmax logits shaped
    /// (frames * (labels.len()+1)) x vocab.
    pub fn rnnt_loss(&mut self, logits: NodeId, labels: &[usize], frames: usize) -> Result<NodeId> {
        let lat = self.lattice_from_logits(logits, labels, frames)?;
        let (loss, _) = lattice::rnnt_loss(&lat)?;
        let rg = self.needs_grad(&[logits]);
        self.push(
            Op::RnntLoss { logits, labels: labels.to_vec(), frames },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// KL coupling between two lattices over the same labels. The teacher
    /// side is treated as a constant: no gradient flows into it.
    pub fn lattice_distillation(
        &mut self,
        teacher: NodeId,
        student: NodeId,
        labels: &[usize],
        frames: usize,
        mode: DistillMode,
    ) -> Result<NodeId> {
        let t = self.lattice_from_logits(teacher, labels, frames)?;
        let s = self.lattice_from_logits(student, labels, frames)?;
        let kl = lattice::lattice_distillation(&t, &s, mode)?;
        let rg = self.needs_grad(&[student]);
        self.push(
            Op::LatticeKl { teacher, student, labels: labels.to_vec(), frames, mode },
            Tensor::scalar(kl),
            rg,
        )
    }

    fn lattice_from_logits(
        &self,
        logits: NodeId,
        labels: &[usize],
        frames: usize,
    ) -> Result<LatticeTensor> {
        let v = self.value(logits);
        LatticeTensor::from_logits(v, labels, frames)
    }

    /// Reverse pass from a scalar node; returns per-parameter gradients for
    /// every parameter that participated in the graph.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            self.backward_op(idx, &upstream, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(upstream);
            }
        }

        let mut out = Gradients::default();
        for (name, id) in &self.param_nodes {
            if let Some(g) = &grads[id.0] {
                out.by_name.insert(
                    name.clone(),
                    Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone())?,
                );
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            None => grads[id.0] = Some(contrib.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(
        &self,
        idx: usize,
        upstream: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum(grads, *a, upstream);
                self.accum(grads, *b, upstream);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> =
                    upstream.iter().zip(vb.data()).map(|(u, y)| u * y).collect();
                let db: Vec<f64> =
                    upstream.iter().zip(va.data()).map(|(u, x)| u * x).collect();
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Scale { a, factor } => {
                let da: Vec<f64> = upstream.iter().map(|u| u * factor).collect();
                self.accum(grads, *a, &da);
            }
            Op::AddBiasRow { a, bias } => {
                self.accum(grads, *a, upstream);
                let n = self.value(*bias).numel();
                let mut db = vec![0.0; n];
                for row in upstream.chunks(n) {
                    for (d, u) in db.iter_mut().zip(row) {
                        *d += u;
                    }
                }
                self.accum(grads, *bias, &db);
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_transpose_b_acc(upstream, vb.data(), &mut da, m, n, k);
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_transpose_a_acc(va.data(), upstream, &mut db, m, k, n);
                    self.accum(grads, *b, &db);
                }
            }
            Op::MatMulTransposeB { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_acc(upstream, vb.data(), &mut da, m, n, k);
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; n * k];
                    matmul_transpose_a_acc(upstream, va.data(), &mut db, m, n, k);
                    self.accum(grads, *b, &db);
                }
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                let da: Vec<f64> =
                    upstream.iter().zip(y).map(|(u, v)| u * (1.0 - v * v)).collect();
                self.accum(grads, *a, &da);
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let da: Vec<f64> =
                    upstream.iter().zip(y).map(|(u, v)| u * v * (1.0 - v)).collect();
                self.accum(grads, *a, &da);
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                let da: Vec<f64> = upstream
                    .iter()
                    .zip(x)
                    .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 })
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::LogSoftmaxRows { a } => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let urow = &upstream[i * n..(i + 1) * n];
                    let total: f64 = urow.iter().sum();
                    let yrow = y.row(i);
                    for j in 0..n {
                        da[i * n + j] = urow[j] - yrow[j].exp() * total;
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::SoftmaxRows { a } => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let urow = &upstream[i * n..(i + 1) * n];
                    let yrow = y.row(i);
                    let dot: f64 = urow.iter().zip(yrow).map(|(u, s)| u * s).sum();
                    for j in 0..n {
                        da[i * n + j] = yrow[j] * (urow[j] - dot);
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::LogSumExpRows { a } => {
                let va = self.value(*a);
                let (m, n) = (va.rows(), va.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let s = node.value.data()[i];
                    let u = upstream[i];
                    for j in 0..n {
                        da[i * n + j] = u * (va.row(i)[j] - s).exp();
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![upstream[0]; self.value(*a).numel()];
                self.accum(grads, *a, &da);
            }
            Op::LayerNormRows { a, gain, bias } => {
                let (va, vg) = (self.value(*a), self.value(*gain));
                let (m, n) = (va.rows(), va.cols());
                let nf = n as f64;
                let mut da = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..m {
                    let row = va.row(i);
                    let urow = &upstream[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var =
                        row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> =
                        row.iter().map(|x| (x - mean) * inv_std).collect();
                    let dxhat: Vec<f64> =
                        urow.iter().zip(vg.data()).map(|(u, g)| u * g).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / nf;
                    for j in 0..n {
                        da[i * n + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dg[j] += urow[j] * xhat[j];
                        db[j] += urow[j];
                    }
                }
                self.accum(grads, *a, &da);
                self.accum(grads, *gain, &dg);
                self.accum(grads, *bias, &db);
            }
            Op::GatherRows { table, ids } => {
                let vt = self.value(*table);
                let n = vt.cols();
                let mut dt = vec![0.0; vt.numel()];
                for (r, &src) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[src * n + j] += upstream[r * n + j];
                    }
                }
                self.accum(grads, *table, &dt);
            }
            Op::SliceRows { a, start, len } => {
                let va = self.value(*a);
                let n = va.cols();
                let mut da = vec![0.0; va.numel()];
                da[start * n..(start + len) * n].copy_from_slice(upstream);
                self.accum(grads, *a, &da);
            }
            Op::SliceCols { a, start, len } => {
                let va = self.value(*a);
                let (m, n) = (va.rows(), va.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..*len {
                        da[i * n + start + j] = upstream[i * len + j];
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let sz = self.value(p).numel();
                    self.accum(grads, p, &upstream[offset..offset + sz]);
                    offset += sz;
                }
            }
            Op::OuterAddRows { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.cols();
                let (m, n) = (va.rows(), vb.rows());
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let u = &upstream[(i * n + j) * d..(i * n + j + 1) * d];
                        for (x, uu) in da[i * d..(i + 1) * d].iter_mut().zip(u) {
                            *x += uu;
                        }
                        for (x, uu) in db[j * d..(j + 1) * d].iter_mut().zip(u) {
                            *x += uu;
                        }
                    }
                }
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::StackFrames { a, factor } => {
                let va = self.value(*a);
                let (t, d) = (va.rows(), va.cols());
                let mut da = vec![0.0; t * d];
                for src in 0..t {
                    let g = src / factor;
                    let offset = (src % factor) * d;
                    let u = &upstream[g * factor * d + offset..g * factor * d + offset + d];
                    da[src * d..(src + 1) * d].copy_from_slice(u);
                }
                self.accum(grads, *a, &da);
            }
            Op::DepthwiseConv { a, kernel, causal } => {
                let (va, vk) = (self.value(*a), self.value(*kernel));
                let (t, c) = (va.rows(), va.cols());
                let k = vk.rows();
                let shift = if *causal { k as isize - 1 } else { (k as isize - 1) / 2 };
                let mut da = vec![0.0; t * c];
                let mut dk = vec![0.0; k * c];
                for out_t in 0..t as isize {
                    let u = &upstream[(out_t as usize) * c..(out_t as usize + 1) * c];
                    for j in 0..k as isize {
                        let src = out_t - shift + j;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let x = va.row(src as usize);
                        let w = vk.row(j as usize);
                        for ch in 0..c {
                            da[(src as usize) * c + ch] += u[ch] * w[ch];
                            dk[(j as usize) * c + ch] += u[ch] * x[ch];
                        }
                    }
                }
                self.accum(grads, *a, &da);
                self.accum(grads, *kernel, &dk);
            }
            Op::RnntLoss { logits, labels, frames } => {
                let lat = self.lattice_from_logits(*logits, labels, *frames)?;
                let grad = lattice::rnnt_grad(&lat)?;
                let da: Vec<f64> =
                    grad.data().iter().map(|g| g * upstream[0]).collect();
                self.accum(grads, *logits, &da);
            }
            Op::LatticeKl { teacher, student, labels, frames, mode } => {
                let t = self.lattice_from_logits(*teacher, labels, *frames)?;
                let s = self.lattice_from_logits(*student, labels, *frames)?;
                let grad = lattice::distillation_grad_student(&t, &s, *mode)?;
                let da: Vec<f64> =
                    grad.data().iter().map(|g| g * upstream[0]).collect();
                self.accum(grads, *student, &da);
            }
        }
        Ok(())
    }
}

/// Build a graph with `build`, then run the reverse pass; returns the scalar
/// value and gradients for every parameter in the store (zeros where the
/// expression does not touch a parameter).
pub fn evaluate_with_gradients<F>(store: &ParameterStore, build: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?.complete_for(store);
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Tensor)]) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (name, t) in entries {
            store.insert(name, t.clone()).unwrap();
        }
        store
    }

    #[test]
    fn square_function_value_and_gradient() {
        let store = store_with(&[("x", Tensor::scalar(3.0))]);
        let (value, grads) = evaluate_with_gradients(&store, |tape| {
            let x = tape.param("x")?;
            let sq = tape.mul(x, x)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!((value - 9.0).abs() < 1e-15);
        assert!((grads.get("x").unwrap().data()[0] - 6.0).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_sum_symmetric_point() {
        let store = store_with(&[("x", Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap())]);
        let (value, grads) = evaluate_with_gradients(&store, |tape| {
            let x = tape.param("x")?;
            let ls = tape.log_softmax_rows(x)?;
            tape.sum_all(ls)
        })
        .unwrap();
        assert!((value + 3.0 * 3f64.ln()).abs() < 1e-12);
        for g in grads.get("x").unwrap().data() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn param_node_is_shared_across_uses() {
        let store = store_with(&[("w", Tensor::scalar(2.0))]);
        let (value, grads) = evaluate_with_gradients(&store, |tape| {
            let a = tape.param("w")?;
            let b = tape.param("w")?;
            assert_eq!(a, b);
            let prod = tape.mul(a, b)?;
            tape.sum_all(prod)
        })
        .unwrap();
        assert!((value - 4.0).abs() < 1e-15);
        // d(w^2)/dw accumulated through both uses
        assert!((grads.get("w").unwrap().data()[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_intermediate_is_reported_with_op_name() {
        let store = store_with(&[("x", Tensor::scalar(1e308))]);
        let err = evaluate_with_gradients(&store, |tape| {
            let x = tape.param("x")?;
            let doubled = tape.scale(x, 10.0)?;
            tape.sum_all(doubled)
        })
        .unwrap_err();
        match err {
            Error::Numeric { op } => assert!(op.starts_with("scale#"), "got {op}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn fully_masked_softmax_row_rejected() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let mask = Rc::new(vec![false, false]);
        assert!(tape.softmax_rows(x, Some(mask)).is_err());
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let store = store_with(&[
            ("used", Tensor::scalar(1.5)),
            ("unused", Tensor::zeros(vec![2, 2])),
        ]);
        let (_, grads) = evaluate_with_gradients(&store, |tape| {
            let x = tape.param("used")?;
            tape.sum_all(x)
        })
        .unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 4]);
    }
}
