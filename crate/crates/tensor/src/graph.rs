//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value plus whatever the backward rule needs (saved activations live inside
//! the op variant). Node ids are indices into the tape, so the tape is
//! topologically ordered by construction and a single reverse sweep visits
//! each node exactly once.
//!
//! Graphs are built per training step and dropped afterwards. Leaves carry
//! `requires_grad`; an op output requires grad iff any input does, and the
//! backward sweep skips everything else.

use std::sync::Arc;

use crate::kernels;
use crate::tensor::{Result, Tensor, TensorError};

pub type NodeId = usize;

/// How a loss aggregates over its active rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    Gelu { x: NodeId },
    Embedding { table: NodeId, ids: Vec<u32> },
    Dropout { x: NodeId, mult: Vec<f64> },
    MaskedSoftmax { x: NodeId },
    Sum { x: NodeId },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        active: Vec<bool>,
        smoothing: f64,
        reduction: Reduction,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradient buffers produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf; zeros when the leaf did not participate in the loss.
    pub fn take_or_zeros(&mut self, graph: &Graph, id: NodeId) -> Tensor {
        self.grads[id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape().to_vec()))
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    finite_checks: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            // Debug builds scan every op output for NaN/Inf.
            finite_checks: cfg!(debug_assertions),
        }
    }

    /// Toggle the NaN/Inf scan on op outputs. The training loop disables it
    /// and inspects the loss itself so it can dump the offending batch.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.finite_checks = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    // -- leaves ------------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, kernel: &'static str) -> Result<NodeId> {
        if self.finite_checks {
            value.assert_finite(kernel)?;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a].requires_grad || self.nodes[b].requires_grad
    }

    // -- elementwise and shape ops ------------------------------------------

    /// `a + b`. `b` may share `a`'s shape, be a row vector broadcast over
    /// `a`'s rows, or be a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let mode = broadcast_mode("add", va, vb)?;
        let mut out = va.clone();
        apply_broadcast(out.data_mut(), vb.data(), mode, |x, y| x + y);
        self.push(out, Op::Add { a, b }, self.rg2(a, b), "add")
    }

    /// Elementwise `a * b` with the same broadcast rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let mode = broadcast_mode("mul", va, vb)?;
        let mut out = va.clone();
        apply_broadcast(out.data_mut(), vb.data(), mode, |x, y| x * y);
        self.push(out, Op::Mul { a, b }, self.rg2(a, b), "mul")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.nodes[x].value.clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let rg = self.nodes[x].requires_grad;
        self.push(out, Op::Scale { x, c }, rg, "scale")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.nodes[a].value.dims2()?;
        let (kb, n) = self.nodes[b].value.dims2()?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                kernel: "matmul",
                lhs: self.nodes[a].value.shape().to_vec(),
                rhs: self.nodes[b].value.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul_auto(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            m,
            ka,
            n,
            out.data_mut(),
        );
        self.push(out, Op::Matmul { a, b }, self.rg2(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        let mut out = Tensor::zeros(vec![c, r]);
        kernels::transpose(self.nodes[x].value.data(), r, c, out.data_mut());
        let rg = self.nodes[x].requires_grad;
        self.push(out, Op::Transpose { x }, rg, "transpose")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument("concat of zero parts".into()));
        }
        let (_, cols) = self.nodes[parts[0]].value.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.nodes[p].value.dims2()?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    kernel: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: self.nodes[p].value.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.nodes[p].value.data());
        }
        let rg = parts.iter().any(|&p| self.nodes[p].requires_grad);
        let out = Tensor::from_vec(vec![rows, cols], data)?;
        self.push(out, Op::ConcatRows { parts: parts.to_vec() }, rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument("concat of zero parts".into()));
        }
        let (rows, _) = self.nodes[parts[0]].value.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.nodes[p].value.dims2()?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    kernel: "concat_cols",
                    lhs: vec![rows, cols],
                    rhs: self.nodes[p].value.shape().to_vec(),
                });
            }
            widths.push(c);
            cols += c;
        }
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.nodes[p].value.data();
                data[i * cols + off..i * cols + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.nodes[p].requires_grad);
        let out = Tensor::from_vec(vec![rows, cols], data)?;
        self.push(out, Op::ConcatCols { parts: parts.to_vec() }, rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.nodes[x].value.dims2()?;
        if start + len > rows {
            return Err(TensorError::ShapeMismatch {
                kernel: "slice_rows",
                lhs: vec![rows, cols],
                rhs: vec![start, len],
            });
        }
        let data = self.nodes[x].value.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.nodes[x].requires_grad;
        let out = Tensor::from_vec(vec![len, cols], data)?;
        self.push(out, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.nodes[x].value.dims2()?;
        if start + len > cols {
            return Err(TensorError::ShapeMismatch {
                kernel: "slice_cols",
                lhs: vec![rows, cols],
                rhs: vec![start, len],
            });
        }
        let src = self.nodes[x].value.data();
        let mut data = vec![0.0; rows * len];
        for i in 0..rows {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let rg = self.nodes[x].requires_grad;
        let out = Tensor::from_vec(vec![rows, len], data)?;
        self.push(out, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    // -- neural-net kernels --------------------------------------------------

    /// Row-wise layer normalization without the affine part; compose with
    /// [`Graph::mul`]/[`Graph::add`] against gain/bias row vectors for that.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, cols) = self.nodes[x].value.dims2()?;
        let mut out = Tensor::zeros(self.nodes[x].value.shape().to_vec());
        let mut inv_std = vec![0.0; rows];
        kernels::layer_norm_auto(
            self.nodes[x].value.data(),
            rows,
            cols,
            eps,
            out.data_mut(),
            &mut inv_std,
        );
        let rg = self.nodes[x].requires_grad;
        self.push(out, Op::LayerNorm { x, inv_std }, rg, "layer_norm")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = Tensor::zeros(self.nodes[x].value.shape().to_vec());
        kernels::gelu_auto(self.nodes[x].value.data(), out.data_mut());
        let rg = self.nodes[x].requires_grad;
        self.push(out, Op::Gelu { x }, rg, "gelu")
    }

    /// Gather rows of `table` by token id: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, h) = self.nodes[table].value.dims2()?;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(TensorError::InvalidArgument(format!(
                "embedding_lookup: id {bad} out of range (table has {v} rows)"
            )));
        }
        let src = self.nodes[table].value.data();
        let mut data = vec![0.0; ids.len() * h];
        for (i, &id) in ids.iter().enumerate() {
            data[i * h..(i + 1) * h].copy_from_slice(&src[id as usize * h..(id as usize + 1) * h]);
        }
        let rg = self.nodes[table].requires_grad;
        let out = Tensor::from_vec(vec![ids.len(), h], data)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding_lookup",
        )
    }

    /// Inverted dropout, deterministic in `seed`. `rate == 0` is the identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let mult = kernels::dropout_mask(self.nodes[x].value.numel(), rate, seed);
        let mut out = self.nodes[x].value.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mult) {
            *o *= m;
        }
        let rg = self.nodes[x].requires_grad;
        self.push(out, Op::Dropout { x, mult }, rg, "dropout")
    }

    /// Softmax over the key axis under an additive mask (see
    /// [`kernels::MASK_BLOCKED`]). Returns the node and the indices of fully
    /// masked rows; those rows are all-zero. With `allow_fully_masked ==
    /// false` a fully masked row is an error instead.
    pub fn masked_softmax(
        &mut self,
        x: NodeId,
        mask: &Arc<Tensor>,
        allow_fully_masked: bool,
    ) -> Result<(NodeId, Vec<usize>)> {
        let (rows, cols) = self.nodes[x].value.dims2()?;
        let (mask_rows, mask_cols) = mask.dims2()?;
        if mask_cols != cols || (mask_rows != rows && mask_rows != 1) {
            return Err(TensorError::ShapeMismatch {
                kernel: "masked_softmax",
                lhs: vec![rows, cols],
                rhs: mask.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(self.nodes[x].value.shape().to_vec());
        let mut flagged = Vec::new();
        kernels::masked_softmax_auto(
            self.nodes[x].value.data(),
            mask.data(),
            rows,
            cols,
            mask_rows,
            out.data_mut(),
            &mut flagged,
        );
        if !allow_fully_masked {
            if let Some(&row) = flagged.first() {
                return Err(TensorError::FullyMaskedRow { row });
            }
        }
        let rg = self.nodes[x].requires_grad;
        let id = self.push(out, Op::MaskedSoftmax { x }, rg, "masked_softmax")?;
        Ok((id, flagged))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[x].value.data().iter().sum();
        let rg = self.nodes[x].requires_grad;
        self.push(Tensor::scalar(total), Op::Sum { x }, rg, "sum")
    }

    /// Label-smoothed cross entropy against integer targets.
    ///
    /// `active` marks the rows that participate (padding and ignored
    /// positions are `false`). Errors when every row is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        active: &[bool],
        smoothing: f64,
        reduction: Reduction,
    ) -> Result<NodeId> {
        let (rows, cols) = self.nodes[logits].value.dims2()?;
        if targets.len() != rows || active.len() != rows {
            return Err(TensorError::ShapeMismatch {
                kernel: "cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![targets.len(), active.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::InvalidArgument(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= cols) {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy: target {bad} out of vocabulary ({cols})"
            )));
        }
        let (total, count) = kernels::cross_entropy_forward(
            self.nodes[logits].value.data(),
            targets,
            active,
            smoothing,
            rows,
            cols,
        );
        if count == 0 {
            return Err(TensorError::EmptyLossMask);
        }
        let value = match reduction {
            Reduction::Mean => total / count as f64,
            Reduction::Sum => total,
        };
        let rg = self.nodes[logits].requires_grad;
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                smoothing,
                reduction,
                count,
            },
            rg,
            "cross_entropy",
        )
    }

    // -- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every `requires_grad` node reachable
    /// from the loss gets its gradient; ask [`Gradients::take_or_zeros`] for
    /// leaves that did not participate.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss].requires_grad {
            grads[loss] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum_with(grads, *a, |buf| add_assign(buf, g.data()));
                let vb = &self.nodes[*b].value;
                let mode = broadcast_mode("add", &self.nodes[*a].value, vb).expect("checked at forward");
                self.accum_with(grads, *b, |buf| reduce_broadcast(buf, g.data(), mode));
            }
            Op::Mul { a, b } => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let mode = broadcast_mode("mul", va, vb).expect("checked at forward");
                self.accum_with(grads, *a, |buf| {
                    // da = g * broadcast(b)
                    let mut tmp = g.data().to_vec();
                    apply_broadcast(&mut tmp, vb.data(), mode, |x, y| x * y);
                    add_assign(buf, &tmp);
                });
                self.accum_with(grads, *b, |buf| {
                    let mut tmp = g.data().to_vec();
                    for (t, x) in tmp.iter_mut().zip(va.data()) {
                        *t *= x;
                    }
                    reduce_broadcast(buf, &tmp, mode);
                });
            }
            Op::Scale { x, c } => {
                self.accum_with(grads, *x, |buf| {
                    for (o, v) in buf.iter_mut().zip(g.data()) {
                        *o += c * v;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (m, k) = va.dims2().expect("checked at forward");
                let (_, n) = vb.dims2().expect("checked at forward");
                self.accum_with(grads, *a, |buf| {
                    // da = g @ b^T
                    let mut bt = vec![0.0; k * n];
                    kernels::transpose(vb.data(), k, n, &mut bt);
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul_auto(g.data(), &bt, m, n, k, &mut tmp);
                    add_assign(buf, &tmp);
                });
                self.accum_with(grads, *b, |buf| {
                    // db = a^T @ g
                    let mut at = vec![0.0; m * k];
                    kernels::transpose(va.data(), m, k, &mut at);
                    let mut tmp = vec![0.0; k * n];
                    kernels::matmul_auto(&at, g.data(), k, m, n, &mut tmp);
                    add_assign(buf, &tmp);
                });
            }
            Op::Transpose { x } => {
                let (r, c) = node.value.dims2().expect("transpose output is 2-D");
                self.accum_with(grads, *x, |buf| {
                    let mut tmp = vec![0.0; r * c];
                    kernels::transpose(g.data(), r, c, &mut tmp);
                    add_assign(buf, &tmp);
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    let slice = &g.data()[offset..offset + len];
                    self.accum_with(grads, p, |buf| add_assign(buf, slice));
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let (rows, cols) = node.value.dims2().expect("concat output is 2-D");
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.nodes[p].value.dims2().expect("checked at forward");
                    self.accum_with(grads, p, |buf| {
                        for i in 0..rows {
                            for j in 0..w {
                                buf[i * w + j] += g.data()[i * cols + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, cols) = self.nodes[*x].value.dims2().expect("checked at forward");
                let begin = start * cols;
                self.accum_with(grads, *x, |buf| {
                    add_assign(&mut buf[begin..begin + g.numel()], g.data());
                });
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.nodes[*x].value.dims2().expect("checked at forward");
                let (_, w) = node.value.dims2().expect("slice output is 2-D");
                self.accum_with(grads, *x, |buf| {
                    for i in 0..rows {
                        for j in 0..w {
                            buf[i * cols + start + j] += g.data()[i * w + j];
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let (rows, cols) = node.value.dims2().expect("checked at forward");
                self.accum_with(grads, *x, |buf| {
                    kernels::layer_norm_backward(g.data(), node.value.data(), inv_std, rows, cols, buf);
                });
            }
            Op::Gelu { x } => {
                let vx = &self.nodes[*x].value;
                self.accum_with(grads, *x, |buf| {
                    for ((o, v), gv) in buf.iter_mut().zip(vx.data()).zip(g.data()) {
                        *o += gv * kernels::gelu_grad_scalar(*v);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let (_, h) = self.nodes[*table].value.dims2().expect("checked at forward");
                self.accum_with(grads, *table, |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id as usize * h..(id as usize + 1) * h];
                        for (o, v) in dst.iter_mut().zip(&g.data()[i * h..(i + 1) * h]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Dropout { x, mult } => {
                self.accum_with(grads, *x, |buf| {
                    for ((o, m), gv) in buf.iter_mut().zip(mult).zip(g.data()) {
                        *o += m * gv;
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let (rows, cols) = node.value.dims2().expect("checked at forward");
                self.accum_with(grads, *x, |buf| {
                    kernels::softmax_backward(g.data(), node.value.data(), rows, cols, buf);
                });
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                self.accum_with(grads, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                smoothing,
                reduction,
                count,
            } => {
                let (rows, cols) = self.nodes[*logits].value.dims2().expect("checked at forward");
                let upstream = match reduction {
                    Reduction::Mean => g.data()[0] / *count as f64,
                    Reduction::Sum => g.data()[0],
                };
                let values = self.nodes[*logits].value.data();
                self.accum_with(grads, *logits, |buf| {
                    kernels::cross_entropy_backward(
                        values, targets, active, *smoothing, rows, cols, upstream, buf,
                    );
                });
            }
        }
    }

    fn accum_with<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Tensor>], id: NodeId, f: F) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id].value.shape().to_vec()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BroadcastMode {
    Same,
    Row,
    Scalar,
}

fn broadcast_mode(kernel: &'static str, a: &Tensor, b: &Tensor) -> Result<BroadcastMode> {
    if a.shape() == b.shape() {
        return Ok(BroadcastMode::Same);
    }
    if b.numel() == 1 {
        return Ok(BroadcastMode::Scalar);
    }
    let (_, cols) = a.dims2()?;
    let (rb, cb) = b.dims2()?;
    if rb == 1 && cb == cols {
        return Ok(BroadcastMode::Row);
    }
    Err(TensorError::ShapeMismatch {
        kernel,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

fn apply_broadcast(out: &mut [f64], b: &[f64], mode: BroadcastMode, f: impl Fn(f64, f64) -> f64) {
    match mode {
        BroadcastMode::Same => {
            for (o, v) in out.iter_mut().zip(b) {
                *o = f(*o, *v);
            }
        }
        BroadcastMode::Scalar => {
            let v = b[0];
            for o in out.iter_mut() {
                *o = f(*o, v);
            }
        }
        BroadcastMode::Row => {
            for chunk in out.chunks_exact_mut(b.len()) {
                for (o, v) in chunk.iter_mut().zip(b) {
                    *o = f(*o, *v);
                }
            }
        }
    }
}

/// Fold an upstream gradient back down to the broadcast operand's shape.
fn reduce_broadcast(buf: &mut [f64], g: &[f64], mode: BroadcastMode) {
    match mode {
        BroadcastMode::Same => add_assign(buf, g),
        BroadcastMode::Scalar => buf[0] += g.iter().sum::<f64>(),
        BroadcastMode::Row => {
            for chunk in g.chunks_exact(buf.len()) {
                add_assign(buf, chunk);
            }
        }
    }
}

fn add_assign(out: &mut [f64], src: &[f64]) {
    for (o, v) in out.iter_mut().zip(src) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]), true);
        let s = g.sum(x).unwrap();
        let mut grads = g.backward(s).unwrap();
        assert_eq!(grads.take_or_zeros(&g, x).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(t2(1, 2, vec![1.0, 2.0]), true);
        let y = g.leaf(t2(1, 2, vec![5.0, 5.0]), true);
        let s = g.sum(x).unwrap();
        let mut grads = g.backward(s).unwrap();
        assert_eq!(grads.take_or_zeros(&g, y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t2(1, 2, vec![1.0, 2.0]), true);
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn matmul_shape_error_names_kernel() {
        let mut g = Graph::new();
        let a = g.constant(t2(2, 3, vec![0.0; 6]));
        let b = g.constant(t2(2, 3, vec![0.0; 6]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { kernel, .. }) => assert_eq!(kernel, "matmul"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn mul_backward_product_rule() {
        // d/dx sum(x*x) = 2x
        let mut g = Graph::new();
        let x = g.leaf(t2(1, 3, vec![1.0, 2.0, 3.0]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let mut grads = g.backward(s).unwrap();
        assert_eq!(grads.take_or_zeros(&g, x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn row_broadcast_add_reduces_over_rows() {
        let mut g = Graph::new();
        let x = g.leaf(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]), true);
        let b = g.leaf(t2(1, 2, vec![10.0, 20.0]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum(y).unwrap();
        let mut grads = g.backward(s).unwrap();
        assert_eq!(grads.take_or_zeros(&g, b).data(), &[2.0, 2.0]);
    }

    #[test]
    fn embedding_scatters_gradient() {
        let mut g = Graph::new();
        let table = g.leaf(t2(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), true);
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = g.sum(e).unwrap();
        let mut grads = g.backward(s).unwrap();
        // row 2 used twice, row 0 once, row 1 never
        assert_eq!(
            grads.take_or_zeros(&g, table).data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.constant(t2(3, 2, vec![0.0; 6]));
        assert!(g.embedding(table, &[3]).is_err());
    }

    #[test]
    fn masked_softmax_strict_rejects_fully_masked() {
        let mut g = Graph::new();
        let x = g.constant(t2(1, 2, vec![0.0, 0.0]));
        let mask = Arc::new(t2(1, 2, vec![kernels::MASK_BLOCKED; 2]));
        assert!(matches!(
            g.masked_softmax(x, &mask, false),
            Err(TensorError::FullyMaskedRow { row: 0 })
        ));
        let (id, flagged) = g.masked_softmax(x, &mask, true).unwrap();
        assert_eq!(flagged, vec![0]);
        assert_eq!(g.value(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_zero_leak() {
        let mut g = Graph::new();
        let x = g.constant(t2(2, 3, vec![5.0, 1.0, -2.0, 0.0, 0.0, 3.0]));
        let mask = Arc::new(t2(2, 3, vec![0.0, kernels::MASK_BLOCKED, 0.0, kernels::MASK_BLOCKED, 0.0, 0.0]));
        let (id, _) = g.masked_softmax(x, &mask, false).unwrap();
        let probs = g.value(id).data();
        assert_eq!(probs[1], 0.0);
        assert_eq!(probs[3], 0.0);
        let row0: f64 = probs[..3].iter().sum();
        let row1: f64 = probs[3..].iter().sum();
        assert!((row0 - 1.0).abs() < 1e-12 && (row1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let mut g = Graph::new();
        let x = g.constant(t2(2, 3, vec![0.0; 6]));
        assert!(matches!(
            g.cross_entropy(x, &[0, 1], &[false, false], 0.0, Reduction::Mean),
            Err(TensorError::EmptyLossMask)
        ));
    }

    #[test]
    fn dropout_zero_rate_is_identity_node() {
        let mut g = Graph::new();
        let x = g.leaf(t2(1, 4, vec![1.0, 2.0, 3.0, 4.0]), true);
        let y = g.dropout(x, 0.0, 123).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn forward_determinism_same_seed() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(t2(4, 4, (0..16).map(|v| v as f64 * 0.37).collect()), true);
            let d = g.dropout(x, 0.5, 99).unwrap();
            let m = g.matmul(d, d).unwrap();
            let s = g.sum(m).unwrap();
            let mut grads = g.backward(s).unwrap();
            (
                g.value(s).item().unwrap(),
                grads.take_or_zeros(&g, x).into_data(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
