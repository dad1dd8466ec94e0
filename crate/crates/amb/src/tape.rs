//! Reverse-mode automatic differentiation on a linear operation tape.
//!
//! Every forward operation appends a node holding its output buffer and a
//! backward rule referencing the input node ids. Ids are append-ordered, so
//! the tape is topologically sorted by construction and `backward` can visit
//! each recorded operation exactly once in reverse. Gradients accumulate
//! additively, which makes reuse of a value across several operations work
//! without bookkeeping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
pub type NodeId = usize;

struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulScalar { x: NodeId, c: T },
    AddBias { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Abs { x: NodeId },
    SoftmaxLastDim { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: T },
    Dropout { x: NodeId, keep: Vec<bool>, scale: T },
    MaskLastDim { x: NodeId, valid: Vec<bool> },
    Transpose { x: NodeId },
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    ConcatCols { xs: Vec<NodeId> },
    ConcatRows { xs: Vec<NodeId> },
    Gather { table: NodeId, ids: Vec<usize> },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Reshape { x: NodeId },
}

/// Computation graph builder and gradient store for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        self.nodes.len() - 1
    }

    /// Records an input value. Gradients flow into it when `requires_grad`.
    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<NodeId, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::BadShape { shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        self.leaf(data, shape, false)
    }

    /// Copies a tensor onto the tape, preserving its `requires_grad` flag.
    pub fn from_tensor(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        &self.nodes[id].data
    }

    /// Drops every node with id >= `len`. Lets finite-difference harnesses
    /// keep a set of bound leaves and replay the forward section repeatedly.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Mutable view of a leaf's buffer, for perturbing inputs in place.
    /// Truncate any dependent nodes first or their values go stale.
    pub fn leaf_data_mut(&mut self, id: NodeId) -> &mut [T] {
        debug_assert!(
            matches!(self.nodes[id].op, Op::Leaf),
            "only leaves may be mutated in place"
        );
        &mut self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    /// Value of a single-element node.
    pub fn value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id].data.len(), 1, "value() expects a scalar node");
        self.nodes[id].data[0]
    }

    fn matrix_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[id].shape;
        if s.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn last_dim(&self, id: NodeId) -> usize {
        *self.nodes[id].shape.last().expect("non-empty shape")
    }

    // ── forward operations ─────────────────────────────────────────────

    /// Matrix product `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        {
            let ad = &self.nodes[a].data;
            let bd = &self.nodes[b].data;
            for i in 0..m {
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += aip * *bv;
                    }
                }
            }
        }
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a, b }))
    }

    /// Elementwise sum of two identically shaped values.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let out: Vec<T> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let out: Vec<T> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(out, shape, rg, Op::Sub { a, b }))
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn mul_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let out: Vec<T> = self.nodes[x].data.iter().map(|v| *v * c).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(out, shape, rg, Op::MulScalar { x, c })
    }

    /// Broadcasts a vector over the last axis: `y[.., j] = x[.., j] + bias[j]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let d = self.last_dim(x);
        if self.nodes[bias].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x].shape.clone(),
                rhs: self.nodes[bias].shape.clone(),
            });
        }
        let bd = &self.nodes[bias].data;
        let out: Vec<T> = self.nodes[x]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bd[i % d])
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad || self.nodes[bias].requires_grad;
        Ok(self.push(out, shape, rg, Op::AddBias { x, bias }))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<T> = self.nodes[x]
            .data
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(out, shape, rg, Op::Relu { x })
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<T> = self.nodes[x].data.iter().map(|v| gelu_value(*v)).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(out, shape, rg, Op::Gelu { x })
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out: Vec<T> = self.nodes[x].data.iter().map(|v| v.abs()).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(out, shape, rg, Op::Abs { x })
    }

    /// Max-subtracted softmax over the last axis; each slice sums to 1.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> NodeId {
        let d = self.last_dim(x);
        let xd = &self.nodes[x].data;
        let mut out = vec![T::zero(); xd.len()];
        for (row_out, row_in) in out.chunks_mut(d).zip(xd.chunks(d)) {
            let mut max = row_in[0];
            for v in &row_in[1..] {
                if *v > max {
                    max = *v;
                }
            }
            let mut sum = T::zero();
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = (*v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(out, shape, rg, Op::SoftmaxLastDim { x })
    }

    /// Per-last-axis standardization followed by an affine transform.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId, TensorError> {
        let d = self.last_dim(x);
        for (id, which) in [(gain, "layer_norm gain"), (bias, "layer_norm bias")] {
            if self.nodes[id].shape != [d] {
                let _ = which;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.nodes[x].shape.clone(),
                    rhs: self.nodes[id].shape.clone(),
                });
            }
        }
        let xd = &self.nodes[x].data;
        let gd = &self.nodes[gain].data;
        let bd = &self.nodes[bias].data;
        let mut out = vec![T::zero(); xd.len()];
        let dn = T::from_f64(d as f64);
        for (row_out, row_in) in out.chunks_mut(d).zip(xd.chunks(d)) {
            let mut mean = T::zero();
            for v in row_in {
                mean += *v;
            }
            mean /= dn;
            let mut var = T::zero();
            for v in row_in {
                let c = *v - mean;
                var += c * c;
            }
            var /= dn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad
            || self.nodes[gain].requires_grad
            || self.nodes[bias].requires_grad;
        Ok(self.push(out, shape, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. Identity when not training or `p == 0`.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadProbability { p });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep: Vec<bool> = (0..self.nodes[x].data.len())
            .map(|_| rng.gen::<f64>() >= p)
            .collect();
        let scale = T::from_f64(1.0 / (1.0 - p));
        let out: Vec<T> = self.nodes[x]
            .data
            .iter()
            .zip(&keep)
            .map(|(v, k)| if *k { *v * scale } else { T::zero() })
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, shape, rg, Op::Dropout { x, keep, scale }))
    }

    /// Writes negative infinity into last-axis positions where `valid` is
    /// false, so a following softmax assigns them exactly zero weight.
    pub fn mask_lastdim_neg_inf(&mut self, x: NodeId, valid: &[bool]) -> Result<NodeId, TensorError> {
        let d = self.last_dim(x);
        if valid.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "mask_lastdim_neg_inf",
                lhs: self.nodes[x].shape.clone(),
                rhs: vec![valid.len()],
            });
        }
        if !valid.iter().any(|v| *v) {
            return Err(TensorError::AllMasked);
        }
        let out: Vec<T> = self.nodes[x]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| if valid[i % d] { *v } else { T::neg_infinity() })
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(
            out,
            shape,
            rg,
            Op::MaskLastDim {
                x,
                valid: valid.to_vec(),
            },
        ))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let xd = &self.nodes[x].data;
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, vec![c, r], rg, Op::Transpose { x }))
    }

    /// Column slice of a matrix: `y = x[:, start..start+len]`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_cols",
                start,
                end: start + len,
                extent: c,
            });
        }
        let xd = &self.nodes[x].data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, vec![r, len], rg, Op::SliceCols { x, start }))
    }

    /// Row slice of a matrix: `y = x[start..start+len, :]`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.matrix_dims("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_rows",
                start,
                end: start + len,
                extent: r,
            });
        }
        let out = self.nodes[x].data[start * c..(start + len) * c].to_vec();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, vec![len, c], rg, Op::SliceRows { x, start }))
    }

    /// Concatenates matrices along the last axis.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptySequence { op: "concat_cols" });
        }
        let (r, _) = self.matrix_dims("concat_cols", xs[0])?;
        let mut total = 0;
        for &x in xs {
            let (ri, ci) = self.matrix_dims("concat_cols", x)?;
            if ri != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[xs[0]].shape.clone(),
                    rhs: self.nodes[x].shape.clone(),
                });
            }
            total += ci;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                let c = self.nodes[x].shape[1];
                out.extend_from_slice(&self.nodes[x].data[i * c..(i + 1) * c]);
            }
        }
        let rg = xs.iter().any(|&x| self.nodes[x].requires_grad);
        Ok(self.push(out, vec![r, total], rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Stacks matrices along the first axis.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptySequence { op: "concat_rows" });
        }
        let (_, c) = self.matrix_dims("concat_rows", xs[0])?;
        let mut rows = 0;
        for &x in xs {
            let (ri, ci) = self.matrix_dims("concat_rows", x)?;
            if ci != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[xs[0]].shape.clone(),
                    rhs: self.nodes[x].shape.clone(),
                });
            }
            rows += ri;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &x in xs {
            out.extend_from_slice(&self.nodes[x].data);
        }
        let rg = xs.iter().any(|&x| self.nodes[x].requires_grad);
        Ok(self.push(out, vec![rows, c], rg, Op::ConcatRows { xs: xs.to_vec() }))
    }

    /// Row lookup: `y[t, :] = table[ids[t], :]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let (rows, d) = self.matrix_dims("gather", table)?;
        if ids.is_empty() {
            return Err(TensorError::EmptySequence { op: "gather" });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IdOutOfRange { id, rows });
            }
            out.extend_from_slice(&self.nodes[table].data[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[table].requires_grad;
        Ok(self.push(
            out,
            vec![ids.len(), d],
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a `[1]` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for v in &self.nodes[x].data {
            s += *v;
        }
        let rg = self.nodes[x].requires_grad;
        self.push(vec![s], vec![1], rg, Op::Sum { x })
    }

    /// Mean of all elements, as a `[1]` node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].data.len();
        let mut s = T::zero();
        for v in &self.nodes[x].data {
            s += *v;
        }
        let rg = self.nodes[x].requires_grad;
        self.push(
            vec![s / T::from_f64(n as f64)],
            vec![1],
            rg,
            Op::Mean { x },
        )
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::BadShape { shape });
        }
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: self.nodes[x].data.len(),
            });
        }
        let out = self.nodes[x].data.clone();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(out, shape, rg, Op::Reshape { x }))
    }

    // ── backward pass ──────────────────────────────────────────────────

    /// Populates gradient buffers for every `requires_grad` node reachable
    /// from the scalar `loss`, visiting each operation once in reverse order.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        if !self.nodes[loss].requires_grad {
            return Ok(());
        }
        self.nodes[loss].grad = Some(vec![T::one()]);
        for i in (0..=loss).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(out_grad) = node.grad.as_deref() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (before[*a].shape[0], before[*a].shape[1]);
                    let n = before[*b].shape[1];
                    if before[*a].requires_grad {
                        let bd = &before[*b].data;
                        let mut da = vec![T::zero(); m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = T::zero();
                                let grow = &out_grad[i * n..(i + 1) * n];
                                let brow = &bd[p * n..(p + 1) * n];
                                for (g, bv) in grow.iter().zip(brow) {
                                    s += *g * *bv;
                                }
                                da[i * k + p] = s;
                            }
                        }
                        accumulate(before, *a, &da);
                    }
                    if before[*b].requires_grad {
                        let ad = &before[*a].data;
                        let mut db = vec![T::zero(); k * n];
                        for p in 0..k {
                            for i in 0..m {
                                let aip = ad[i * k + p];
                                if aip == T::zero() {
                                    continue;
                                }
                                let grow = &out_grad[i * n..(i + 1) * n];
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (d, g) in drow.iter_mut().zip(grow) {
                                    *d += aip * *g;
                                }
                            }
                        }
                        accumulate(before, *b, &db);
                    }
                }
                Op::Add { a, b } => {
                    if before[*a].requires_grad {
                        accumulate(before, *a, out_grad);
                    }
                    if before[*b].requires_grad {
                        accumulate(before, *b, out_grad);
                    }
                }
                Op::Sub { a, b } => {
                    if before[*a].requires_grad {
                        accumulate(before, *a, out_grad);
                    }
                    if before[*b].requires_grad {
                        let neg: Vec<T> = out_grad.iter().map(|g| -*g).collect();
                        accumulate(before, *b, &neg);
                    }
                }
                Op::MulScalar { x, c } => {
                    if before[*x].requires_grad {
                        let dx: Vec<T> = out_grad.iter().map(|g| *g * *c).collect();
                        accumulate(before, *x, &dx);
                    }
                }
                Op::AddBias { x, bias } => {
                    let d = *before[*bias].shape.first().expect("bias is 1-d");
                    if before[*x].requires_grad {
                        accumulate(before, *x, out_grad);
                    }
                    if before[*bias].requires_grad {
                        let mut db = vec![T::zero(); d];
                        for (i, g) in out_grad.iter().enumerate() {
                            db[i % d] += *g;
                        }
                        accumulate(before, *bias, &db);
                    }
                }
                Op::Relu { x } => {
                    if before[*x].requires_grad {
                        let dx: Vec<T> = before[*x]
                            .data
                            .iter()
                            .zip(out_grad)
                            .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
                            .collect();
                        accumulate(before, *x, &dx);
                    }
                }
                Op::Gelu { x } => {
                    if before[*x].requires_grad {
                        let dx: Vec<T> = before[*x]
                            .data
                            .iter()
                            .zip(out_grad)
                            .map(|(v, g)| *g * gelu_derivative(*v))
                            .collect();
                        accumulate(before, *x, &dx);
                    }
                }
                Op::Abs { x } => {
                    if before[*x].requires_grad {
                        let dx: Vec<T> = before[*x]
                            .data
                            .iter()
                            .zip(out_grad)
                            .map(|(v, g)| {
                                if *v > T::zero() {
                                    *g
                                } else if *v < T::zero() {
                                    -*g
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        accumulate(before, *x, &dx);
                    }
                }
                Op::SoftmaxLastDim { x } => {
                    if before[*x].requires_grad {
                        let d = *node.shape.last().expect("non-empty shape");
                        let y = &node.data;
                        let mut dx = vec![T::zero(); y.len()];
                        for ((dx_row, y_row), g_row) in
                            dx.chunks_mut(d).zip(y.chunks(d)).zip(out_grad.chunks(d))
                        {
                            let mut dot = T::zero();
                            for (g, yv) in g_row.iter().zip(y_row) {
                                dot += *g * *yv;
                            }
                            for j in 0..d {
                                dx_row[j] = y_row[j] * (g_row[j] - dot);
                            }
                        }
                        accumulate(before, *x, &dx);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = *before[*gain].shape.first().expect("gain is 1-d");
                    let dn = T::from_f64(d as f64);
                    let xd = &before[*x].data;
                    let gd = &before[*gain].data;
                    let mut dx = vec![T::zero(); xd.len()];
                    let mut dgain = vec![T::zero(); d];
                    let mut dbias = vec![T::zero(); d];
                    for (row, (x_row, g_row)) in xd.chunks(d).zip(out_grad.chunks(d)).enumerate() {
                        let mut mean = T::zero();
                        for v in x_row {
                            mean += *v;
                        }
                        mean /= dn;
                        let mut var = T::zero();
                        for v in x_row {
                            let c = *v - mean;
                            var += c * c;
                        }
                        var /= dn;
                        let inv = (var + *eps).sqrt().recip();
                        let mut mh = T::zero();
                        let mut mhx = T::zero();
                        for j in 0..d {
                            let xhat = (x_row[j] - mean) * inv;
                            let h = g_row[j] * gd[j];
                            mh += h;
                            mhx += h * xhat;
                            dgain[j] += g_row[j] * xhat;
                            dbias[j] += g_row[j];
                        }
                        mh /= dn;
                        mhx /= dn;
                        let dx_row = &mut dx[row * d..(row + 1) * d];
                        for j in 0..d {
                            let xhat = (x_row[j] - mean) * inv;
                            let h = g_row[j] * gd[j];
                            dx_row[j] = inv * (h - mh - xhat * mhx);
                        }
                    }
                    if before[*x].requires_grad {
                        accumulate(before, *x, &dx);
                    }
                    if before[*gain].requires_grad {
                        accumulate(before, *gain, &dgain);
                    }
                    if before[*bias].requires_grad {
                        accumulate(before, *bias, &dbias);
                    }
                }
                Op::Dropout { x, keep, scale } => {
                    if before[*x].requires_grad {
                        let dx: Vec<T> = out_grad
                            .iter()
                            .zip(keep)
                            .map(|(g, k)| if *k { *g * *scale } else { T::zero() })
                            .collect();
                        accumulate(before, *x, &dx);
                    }
                }
                Op::MaskLastDim { x, valid } => {
                    if before[*x].requires_grad {
                        let d = valid.len();
                        let dx: Vec<T> = out_grad
                            .iter()
                            .enumerate()
                            .map(|(i, g)| if valid[i % d] { *g } else { T::zero() })
                            .collect();
                        accumulate(before, *x, &dx);
                    }
                }
                Op::Transpose { x } => {
                    if before[*x].requires_grad {
                        let (r, c) = (before[*x].shape[0], before[*x].shape[1]);
                        let mut dx = vec![T::zero(); r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = out_grad[j * r + i];
                            }
                        }
                        accumulate(before, *x, &dx);
                    }
                }
                Op::SliceCols { x, start } => {
                    if before[*x].requires_grad {
                        let (r, c) = (before[*x].shape[0], before[*x].shape[1]);
                        let len = node.shape[1];
                        let mut dx = vec![T::zero(); r * c];
                        for i in 0..r {
                            dx[i * c + start..i * c + start + len]
                                .copy_from_slice(&out_grad[i * len..(i + 1) * len]);
                        }
                        accumulate(before, *x, &dx);
                    }
                }
                Op::SliceRows { x, start } => {
                    if before[*x].requires_grad {
                        let (r, c) = (before[*x].shape[0], before[*x].shape[1]);
                        let len = node.shape[0];
                        let mut dx = vec![T::zero(); r * c];
                        dx[start * c..(start + len) * c].copy_from_slice(out_grad);
                        accumulate(before, *x, &dx);
                    }
                }
                Op::ConcatCols { xs } => {
                    let r = node.shape[0];
                    let total = node.shape[1];
                    let mut offset = 0;
                    let xs = xs.clone();
                    for x in xs {
                        let c = before[x].shape[1];
                        if before[x].requires_grad {
                            let mut dx = vec![T::zero(); r * c];
                            for i in 0..r {
                                dx[i * c..(i + 1) * c].copy_from_slice(
                                    &out_grad[i * total + offset..i * total + offset + c],
                                );
                            }
                            accumulate(before, x, &dx);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows { xs } => {
                    let mut offset = 0;
                    let xs = xs.clone();
                    for x in xs {
                        let n = before[x].data.len();
                        if before[x].requires_grad {
                            accumulate(before, x, &out_grad[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::Gather { table, ids } => {
                    if before[*table].requires_grad {
                        let d = before[*table].shape[1];
                        let mut dt = vec![T::zero(); before[*table].data.len()];
                        for (t, &id) in ids.iter().enumerate() {
                            let src = &out_grad[t * d..(t + 1) * d];
                            let dst = &mut dt[id * d..(id + 1) * d];
                            for (dv, g) in dst.iter_mut().zip(src) {
                                *dv += *g;
                            }
                        }
                        accumulate(before, *table, &dt);
                    }
                }
                Op::Sum { x } => {
                    if before[*x].requires_grad {
                        let g = out_grad[0];
                        let dx = vec![g; before[*x].data.len()];
                        accumulate(before, *x, &dx);
                    }
                }
                Op::Mean { x } => {
                    if before[*x].requires_grad {
                        let n = before[*x].data.len();
                        let g = out_grad[0] / T::from_f64(n as f64);
                        let dx = vec![g; n];
                        accumulate(before, *x, &dx);
                    }
                }
                Op::Reshape { x } => {
                    if before[*x].requires_grad {
                        accumulate(before, *x, out_grad);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], id: NodeId, delta: &[T]) {
    let node = &mut nodes[id];
    let grad = node
        .grad
        .get_or_insert_with(|| vec![T::zero(); node.data.len()]);
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += *d;
    }
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044_715);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
