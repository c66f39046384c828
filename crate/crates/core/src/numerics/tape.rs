//! Eager reverse-mode autodiff on flat row-major f32 buffers.
//!
//! Every operation records a node, computes its value immediately, and
//! `backward` walks the records in reverse. Gradients accumulate into leaf
//! nodes across backward calls; callers zero them by rebuilding the tape or
//! via the parameter store.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, GradBufs, Values};

/// Handle to a node on a [`Tape`]. Cheap to clone; owns no data.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) id: usize,
    shape: Arc<Vec<usize>>,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug)]
pub(crate) enum OpKind {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Mul { a: usize, b: usize },
    MulScalar { x: usize, c: f64 },
    Relu { x: usize },
    Exp { x: usize },
    GatherRows { table: usize, ids: Arc<Vec<usize>> },
    MaskedSoftmax { x: usize, mask: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceCols { x: usize, start: usize, end: usize },
    SliceRows { x: usize, start: usize, end: usize },
    Reshape { x: usize },
    RowwiseDot { a: usize, b: usize },
    LogSumExp { x: usize, mask: Option<usize> },
    Sum { x: usize },
    Mean { x: usize },
}

pub(crate) struct Node {
    pub op: OpKind,
    pub data: Vec<f32>,
    pub shape: Arc<Vec<usize>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

/// The recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Values<f32> for Tape {
    fn val(&self, id: usize) -> &[f32] {
        &self.nodes[id].data
    }
    fn shape(&self, id: usize) -> &[usize] {
        &self.nodes[id].shape
    }
    fn requires_grad(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }
}

fn shape_err(what: &str, shapes: &[&[usize]]) -> Error {
    let rendered: Vec<String> = shapes.iter().map(|s| format!("{s:?}")).collect();
    Error::Shape(format!("{what}: got {}", rendered.join(" and ")))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Forward value of a node.
    pub fn data(&self, t: &Tensor) -> &[f32] {
        &self.nodes[t.id].data
    }

    /// Convenience accessor for scalar outputs.
    pub fn scalar(&self, t: &Tensor) -> Result<f32> {
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "scalar() on tensor of shape {:?}",
                t.shape()
            )));
        }
        Ok(self.nodes[t.id].data[0])
    }

    /// `scalar` recomputed by the f64 shadow pass. Oracle-grade: compare
    /// against independent f64 recomputations without f32 rounding noise.
    pub fn scalar_f64(&self, t: &Tensor) -> Result<f64> {
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "scalar_f64() on tensor of shape {:?}",
                t.shape()
            )));
        }
        Ok(super::shadow::forward(self, None)?.val_of(t.id))
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, t: &Tensor) -> Option<&[f32]> {
        self.nodes[t.id].grad.as_deref()
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "leaf data has {} elements, shape {:?} wants {}",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.is_empty() {
            return Err(Error::Shape("leaf shape must have at least one dim".into()));
        }
        let shape = Arc::new(shape.to_vec());
        self.nodes.push(Node {
            op: OpKind::Leaf,
            data,
            shape: shape.clone(),
            requires_grad,
            grad: None,
        });
        Ok(Tensor { id: self.nodes.len() - 1, shape })
    }

    /// Leaf that never receives gradient (inputs, masks).
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    // ── op plumbing ──────────────────────────────────────────────────

    fn push(&mut self, op: OpKind, shape: Vec<usize>) -> Result<Tensor> {
        let requires_grad = match &op {
            OpKind::Leaf => unreachable!(),
            OpKind::MatMul { a, b }
            | OpKind::MatMulNT { a, b }
            | OpKind::Add { a, b }
            | OpKind::Mul { a, b }
            | OpKind::RowwiseDot { a, b }
            | OpKind::AddBias { x: a, b } => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            OpKind::MulScalar { x, .. }
            | OpKind::Relu { x }
            | OpKind::Exp { x }
            | OpKind::GatherRows { table: x, .. }
            | OpKind::MaskedSoftmax { x, .. }
            | OpKind::SliceCols { x, .. }
            | OpKind::SliceRows { x, .. }
            | OpKind::Reshape { x }
            | OpKind::LogSumExp { x, .. }
            | OpKind::Sum { x }
            | OpKind::Mean { x } => self.nodes[*x].requires_grad,
            OpKind::LayerNorm { x, gain, bias, .. } => {
                self.nodes[*x].requires_grad
                    || self.nodes[*gain].requires_grad
                    || self.nodes[*bias].requires_grad
            }
            OpKind::ConcatCols { parts } | OpKind::ConcatRows { parts } => {
                parts.iter().any(|&p| self.nodes[p].requires_grad)
            }
        };
        let data = kernels::forward_node::<f32>(&op, self, &shape)?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {bad} produced by {}",
                op_name(&op)
            )));
        }
        let shape = Arc::new(shape);
        self.nodes.push(Node { op, data, shape: shape.clone(), requires_grad, grad: None });
        Ok(Tensor { id: self.nodes.len() - 1, shape })
    }

    fn want_rank2(&self, t: &Tensor, what: &str) -> Result<(usize, usize)> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(shape_err(&format!("{what} wants a rank-2 tensor"), &[s]));
        }
        Ok((s[0], s[1]))
    }

    // ── operations ───────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = self.want_rank2(a, "matmul lhs")?;
        let (kb, n) = self.want_rank2(b, "matmul rhs")?;
        if ka != kb {
            return Err(shape_err("matmul inner dims differ", &[a.shape(), b.shape()]));
        }
        self.push(OpKind::MatMul { a: a.id, b: b.id }, vec![m, n])
    }

    /// `[m,k] x [n,k]^T -> [m,n]`; rows-dot-rows, used for score matrices.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = self.want_rank2(a, "matmul_nt lhs")?;
        let (n, kb) = self.want_rank2(b, "matmul_nt rhs")?;
        if ka != kb {
            return Err(shape_err("matmul_nt inner dims differ", &[a.shape(), b.shape()]));
        }
        self.push(OpKind::MatMulNT { a: a.id, b: b.id }, vec![m, n])
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err("add shapes differ", &[a.shape(), b.shape()]));
        }
        self.push(OpKind::Add { a: a.id, b: b.id }, a.shape().to_vec())
    }

    /// Broadcast-add a `[d]` (or `[1,d]`) bias to every row of `x`.
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = *x.shape().last().unwrap();
        let ok = b.shape() == [d] || b.shape() == [1, d];
        if !ok {
            return Err(shape_err("add_bias wants bias of last-dim width", &[x.shape(), b.shape()]));
        }
        self.push(OpKind::AddBias { x: x.id, b: b.id }, x.shape().to_vec())
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err("mul shapes differ", &[a.shape(), b.shape()]));
        }
        self.push(OpKind::Mul { a: a.id, b: b.id }, a.shape().to_vec())
    }

    pub fn mul_scalar(&mut self, x: &Tensor, c: f32) -> Result<Tensor> {
        self.push(OpKind::MulScalar { x: x.id, c: c as f64 }, x.shape().to_vec())
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.push(OpKind::Relu { x: x.id }, x.shape().to_vec())
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.push(OpKind::Exp { x: x.id }, x.shape().to_vec())
    }

    /// Select rows of `table` by index; out-of-range ids are an error.
    pub fn gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.want_rank2(table, "gather_rows table")?;
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, len: v, what: "gather_rows row".into() });
            }
        }
        self.push(
            OpKind::GatherRows { table: table.id, ids: Arc::new(ids.to_vec()) },
            vec![ids.len(), d],
        )
    }

    fn check_mask(&self, x: &Tensor, mask: &Tensor, what: &str) -> Result<()> {
        if x.shape() != mask.shape() {
            return Err(shape_err(
                &format!("{what} mask shape differs from input"),
                &[x.shape(), mask.shape()],
            ));
        }
        if self.nodes[mask.id].requires_grad {
            return Err(Error::Contract(format!("{what} mask must not require grad")));
        }
        for &m in &self.nodes[mask.id].data {
            if m != 0.0 && m != f32::NEG_INFINITY {
                return Err(Error::InvalidMask(format!(
                    "{what} mask entries must be 0 or -inf, got {m}"
                )));
            }
        }
        Ok(())
    }

    /// Row-wise softmax over the last dim of `x + mask`, where `mask` holds
    /// 0 for allowed entries and -inf for disallowed ones. A fully masked
    /// row is an error, never a NaN.
    pub fn masked_softmax(&mut self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.check_mask(x, mask, "masked_softmax")?;
        self.push(OpKind::MaskedSoftmax { x: x.id, mask: mask.id }, x.shape().to_vec())
    }

    /// Layer normalization over the last dim with learned gain and bias.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *x.shape().last().unwrap();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_err(
                "layer_norm gain/bias want last-dim width",
                &[x.shape(), gain.shape(), bias.shape()],
            ));
        }
        self.push(
            OpKind::LayerNorm { x: x.id, gain: gain.id, bias: bias.id, eps: eps as f64 },
            x.shape().to_vec(),
        )
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let (rows, mut total) = self.want_rank2(parts[0], "concat_cols part")?;
        for p in &parts[1..] {
            let (r, d) = self.want_rank2(p, "concat_cols part")?;
            if r != rows {
                return Err(shape_err("concat_cols row counts differ", &[parts[0].shape(), p.shape()]));
            }
            total += d;
        }
        self.push(
            OpKind::ConcatCols { parts: parts.iter().map(|t| t.id).collect() },
            vec![rows, total],
        )
    }

    /// Stack rank-2 tensors with equal widths along rows.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let (mut rows, d) = self.want_rank2(parts[0], "concat_rows part")?;
        for p in &parts[1..] {
            let (r, dp) = self.want_rank2(p, "concat_rows part")?;
            if dp != d {
                return Err(shape_err("concat_rows widths differ", &[parts[0].shape(), p.shape()]));
            }
            rows += r;
        }
        self.push(
            OpKind::ConcatRows { parts: parts.iter().map(|t| t.id).collect() },
            vec![rows, d],
        )
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (rows, d) = self.want_rank2(x, "slice_cols")?;
        if start >= end || end > d {
            return Err(Error::Index { index: end, len: d, what: format!("slice_cols {start}..{end}") });
        }
        self.push(OpKind::SliceCols { x: x.id, start, end }, vec![rows, end - start])
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (rows, d) = self.want_rank2(x, "slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::Index { index: end, len: rows, what: format!("slice_rows {start}..{end}") });
        }
        self.push(OpKind::SliceRows { x: x.id, start, end }, vec![end - start, d])
    }

    /// View with the same row-major buffer under a new shape.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.is_empty() {
            return Err(shape_err("reshape must preserve element count", &[x.shape(), shape]));
        }
        self.push(OpKind::Reshape { x: x.id }, shape.to_vec())
    }

    /// Per-row dot product of two `[r,d]` tensors, yielding `[r,1]`.
    pub fn rowwise_dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (r, _) = self.want_rank2(a, "rowwise_dot lhs")?;
        if a.shape() != b.shape() {
            return Err(shape_err("rowwise_dot shapes differ", &[a.shape(), b.shape()]));
        }
        self.push(OpKind::RowwiseDot { a: a.id, b: b.id }, vec![r, 1])
    }

    /// Row-wise log-sum-exp over the last dim, `[r,d] -> [r,1]`, with an
    /// optional 0/-inf mask excluding entries from the sum.
    pub fn log_sum_exp(&mut self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        if let Some(m) = mask {
            self.check_mask(x, m, "log_sum_exp")?;
        }
        let d = *x.shape().last().unwrap();
        let rows = x.numel() / d;
        self.push(
            OpKind::LogSumExp { x: x.id, mask: mask.map(|m| m.id) },
            vec![rows, 1],
        )
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        self.push(OpKind::Sum { x: x.id }, vec![1])
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        self.push(OpKind::Mean { x: x.id }, vec![1])
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of leaf nodes accumulate:
    /// calling backward twice doubles them.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !self.nodes[loss.id].requires_grad {
            return Err(Error::Contract("backward from a node with no grad path".into()));
        }
        let mut bufs = GradBufs::<f32>::new(self.nodes.len());
        bufs.seed(loss.id, 1.0);
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = bufs.take(id) else { continue };
            {
                let node = &self.nodes[id];
                kernels::backward_node::<f32>(&node.op, &node.data, &g, self, &mut bufs);
            }
            if matches!(self.nodes[id].op, OpKind::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(&g) {
                            *a += gi;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &OpKind) -> &'static str {
    match op {
        OpKind::Leaf => "leaf",
        OpKind::MatMul { .. } => "matmul",
        OpKind::MatMulNT { .. } => "matmul_nt",
        OpKind::Add { .. } => "add",
        OpKind::AddBias { .. } => "add_bias",
        OpKind::Mul { .. } => "mul",
        OpKind::MulScalar { .. } => "mul_scalar",
        OpKind::Relu { .. } => "relu",
        OpKind::Exp { .. } => "exp",
        OpKind::GatherRows { .. } => "gather_rows",
        OpKind::MaskedSoftmax { .. } => "masked_softmax",
        OpKind::LayerNorm { .. } => "layer_norm",
        OpKind::ConcatCols { .. } => "concat_cols",
        OpKind::ConcatRows { .. } => "concat_rows",
        OpKind::SliceCols { .. } => "slice_cols",
        OpKind::SliceRows { .. } => "slice_rows",
        OpKind::Reshape { .. } => "reshape",
        OpKind::RowwiseDot { .. } => "rowwise_dot",
        OpKind::LogSumExp { .. } => "log_sum_exp",
        OpKind::Sum { .. } => "sum",
        OpKind::Mean { .. } => "mean",
    }
}
