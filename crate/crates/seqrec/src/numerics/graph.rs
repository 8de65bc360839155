//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a write-once tape: forward calls append nodes, `backward`
//! sweeps the tape in reverse and accumulates gradients into every leaf, and
//! `apply_grads` adds leaf gradients into the owning [`ParamStore`]. The op
//! set is exactly what the model needs; this is not a general tensor library.
//!
//! A parameter requested twice yields the same leaf node, so a shared table
//! (e.g. the position embeddings used by all towers) accumulates gradient
//! contributions from every path that consumed it.

use std::collections::BTreeMap;

use super::kernels;
use super::matrix::{matmul, matmul_nt, matmul_tn, MaskMatrix, Matrix};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// a * b^T
    MatmulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// bias (1 x c) added to every row of a
    AddRowBroadcast(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId, Option<MaskMatrix>),
    LayerNormRows(NodeId, f64),
    L2NormalizeRows(NodeId, f64),
    GatherRows(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Dropout(NodeId, Vec<bool>, f64),
    InfoNce(NodeId, f64),
    CrossEntropyMean(NodeId, Vec<usize>),
    SumEntries(NodeId),
    SumSquares(NodeId),
    /// Weighted sum of 1x1 scalars.
    AddScaled(Vec<(f64, NodeId)>),
    BatchAttention(Box<BatchAttentionOp>),
}

/// Scaled-dot-product attention over a batch of fixed-length sequences
/// stacked row-wise into `(batch * seq_len) x d` operands, with optional
/// multi-head column splitting and optional dropout on the attention
/// weights. Fusing the whole batch into one node keeps tapes short and lets
/// the heavy projections stay batched.
#[derive(Debug)]
struct BatchAttentionOp {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    masks: Vec<MaskMatrix>,
    seq_len: usize,
    heads: usize,
    scale: f64,
    /// keep flags laid out [instance][head][query][key], with the 1/keep_rate factor
    attn_keep: Option<(Vec<bool>, f64)>,
}

impl BatchAttentionOp {
    fn head_width(&self, d: usize) -> usize {
        d / self.heads
    }

    /// n x dh copy of one instance/head block.
    fn sub(m: &Matrix, row0: usize, n: usize, col0: usize, dh: usize) -> Matrix {
        let mut out = Matrix::zeros(n, dh);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&m.row(row0 + r)[col0..col0 + dh]);
        }
        out
    }

    fn weights(&self, values: &[Matrix], b: usize, h: usize) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
        let n = self.seq_len;
        let dh = self.head_width(values[self.q.0].cols());
        let qs = Self::sub(&values[self.q.0], b * n, n, h * dh, dh);
        let ks = Self::sub(&values[self.k.0], b * n, n, h * dh, dh);
        let vs = Self::sub(&values[self.v.0], b * n, n, h * dh, dh);
        let mut scores = matmul_nt(&qs, &ks)?;
        scores.scale_in_place(self.scale);
        let w = kernels::softmax_rows(&scores, Some(&self.masks[b]))?;
        Ok((qs, ks, vs, w))
    }

    fn dropped(&self, w: &Matrix, b: usize, h: usize) -> Matrix {
        let Some((keep, inv)) = &self.attn_keep else {
            return w.clone();
        };
        let n = self.seq_len;
        let base = (b * self.heads + h) * n * n;
        let mut out = w.clone();
        for (idx, val) in out.data_mut().iter_mut().enumerate() {
            *val = if keep[base + idx] { *val * inv } else { 0.0 };
        }
        out
    }
}

pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Matrix>,
    grads: Vec<Option<Matrix>>,
    param_leaves: BTreeMap<ParamId, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            param_leaves: BTreeMap::new(),
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite node value in graph");
        self.ops.push(op);
        self.values.push(value);
        NodeId(self.ops.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id.0].shape(), (1, 1));
        self.values[id.0].at(0, 0)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Leaf for a parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_leaves.get(&id) {
            return node;
        }
        let node = self.push(Op::Leaf, store.get(id).value.clone());
        self.param_leaves.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(&self.values[a.0], &self.values[b.0])?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_nt(&self.values[a.0], &self.values[b.0])?;
        Ok(self.push(Op::MatmulNT(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].add(&self.values[b.0])?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = kernels::add_row_broadcast(&self.values[a.0], &self.values[bias.0])?;
        Ok(self.push(Op::AddRowBroadcast(a, bias), value))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.values[a.0].scaled(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.values[a.0].clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<MaskMatrix>) -> Result<NodeId> {
        let value = kernels::softmax_rows(&self.values[a.0], mask.as_ref())?;
        Ok(self.push(Op::SoftmaxRows(a, mask), value))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let value = kernels::layer_norm_rows(&self.values[a.0], eps);
        self.push(Op::LayerNormRows(a, eps), value)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let value = kernels::l2_normalize_rows(&self.values[a.0], eps)?;
        Ok(self.push(Op::L2NormalizeRows(a, eps), value))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let src = &self.values[a.0];
        let mut out = Matrix::zeros(indices.len(), src.cols());
        for (r, &i) in indices.iter().enumerate() {
            if i >= src.rows() {
                return Err(Error::Index(format!(
                    "gather row {i} out of range for {} rows",
                    src.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        Ok(self.push(Op::GatherRows(a, indices), out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.values[parts[0].0].rows();
        let total: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let m = &self.values[p.0];
            if m.rows() != rows {
                return Err(Error::shape("concat_cols", (rows, total), m.shape()));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.values[parts[0].0].cols();
        let total: usize = parts.iter().map(|p| self.values[p.0].rows()).sum();
        let mut out = Matrix::zeros(total, cols);
        let mut offset = 0;
        for p in parts {
            let m = &self.values[p.0];
            if m.cols() != cols {
                return Err(Error::shape("concat_rows", (total, cols), m.shape()));
            }
            for r in 0..m.rows() {
                out.row_mut(offset + r).copy_from_slice(m.row(r));
            }
            offset += m.rows();
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = &self.values[a.0];
        if start + len > src.cols() {
            return Err(Error::Index(format!(
                "column slice {start}..{} out of range for {} cols",
                start + len,
                src.cols()
            )));
        }
        let mut out = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(a, start, len), out))
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate). `rate == 0`
    /// is a no-op that adds no node.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> NodeId {
        if rate == 0.0 {
            return a;
        }
        let src = &self.values[a.0];
        let keep: Vec<bool> = (0..src.rows() * src.cols())
            .map(|_| rng.gen::<f64>() >= rate)
            .collect();
        let inv = 1.0 / (1.0 - rate);
        let mut value = src.clone();
        for (v, &k) in value.data_mut().iter_mut().zip(&keep) {
            *v = if k { *v * inv } else { 0.0 };
        }
        self.push(Op::Dropout(a, keep, inv), value)
    }

    pub fn info_nce(&mut self, sim: NodeId, tau: f64) -> Result<NodeId> {
        let loss = kernels::info_nce(&self.values[sim.0], tau)?;
        let value = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(Op::InfoNce(sim, tau), value))
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let loss = kernels::cross_entropy(&self.values[logits.0], &targets)?;
        let value = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(Op::CrossEntropyMean(logits, targets), value))
    }

    pub fn sum_entries(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.values[a.0].data().iter().sum();
        let value = Matrix::from_vec(1, 1, vec![s]).unwrap();
        self.push(Op::SumEntries(a), value)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.values[a.0].frobenius_sq();
        let value = Matrix::from_vec(1, 1, vec![s]).unwrap();
        self.push(Op::SumSquares(a), value)
    }

    /// sum_i coeff_i * scalar_i over 1x1 nodes.
    pub fn add_scaled(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let mut s = 0.0;
        for (c, t) in terms {
            let v = &self.values[t.0];
            if v.shape() != (1, 1) {
                return Err(Error::shape("add_scaled", (1, 1), v.shape()));
            }
            s += c * v.at(0, 0);
        }
        let value = Matrix::from_vec(1, 1, vec![s])?;
        Ok(self.push(Op::AddScaled(terms.to_vec()), value))
    }

    /// softmax(q k^T * scale, mask) v as a composite.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<MaskMatrix>,
        scale: f64,
    ) -> Result<NodeId> {
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, scale);
        let weights = self.softmax_rows(scaled, mask)?;
        self.matmul(weights, v)
    }

    /// relu(x w1 + b1) w2 + b2 as a composite.
    pub fn ffn(
        &mut self,
        x: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    ) -> Result<NodeId> {
        let h = self.matmul(x, w1)?;
        let h = self.add_row_broadcast(h, b1)?;
        let h = self.relu(h);
        let out = self.matmul(h, w2)?;
        self.add_row_broadcast(out, b2)
    }

    /// Attention over a batch of sequences stacked row-wise: `q`, `k`, `v`
    /// are `(masks.len() * seq_len) x d`, instance `b` uses `masks[b]`, and
    /// the `d` columns are split into `heads` independent slices, each scored
    /// with the given `scale`.
    pub fn batch_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        masks: Vec<MaskMatrix>,
        heads: usize,
        scale: f64,
    ) -> Result<NodeId> {
        self.batch_attention_inner(q, k, v, masks, heads, scale, None)
    }

    /// [`Graph::batch_attention`] with dropout applied to the attention
    /// weights (rows are no longer guaranteed to sum to one afterwards).
    pub fn batch_attention_dropout<R: Rng>(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        masks: Vec<MaskMatrix>,
        heads: usize,
        scale: f64,
        rate: f64,
        rng: &mut R,
    ) -> Result<NodeId> {
        let keep = if rate == 0.0 {
            None
        } else {
            let n = masks.first().map_or(0, MaskMatrix::rows);
            let flags = (0..masks.len() * heads * n * n)
                .map(|_| rng.gen::<f64>() >= rate)
                .collect();
            Some((flags, 1.0 / (1.0 - rate)))
        };
        self.batch_attention_inner(q, k, v, masks, heads, scale, keep)
    }

    fn batch_attention_inner(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        masks: Vec<MaskMatrix>,
        heads: usize,
        scale: f64,
        attn_keep: Option<(Vec<bool>, f64)>,
    ) -> Result<NodeId> {
        let shape = self.values[q.0].shape();
        if self.values[k.0].shape() != shape || self.values[v.0].shape() != shape {
            return Err(Error::Parameter(format!(
                "batch attention operands disagree: q {:?}, k {:?}, v {:?}",
                shape,
                self.values[k.0].shape(),
                self.values[v.0].shape()
            )));
        }
        let (rows, cols) = shape;
        if masks.is_empty() || rows % masks.len() != 0 {
            return Err(Error::Parameter(format!(
                "{} rows do not split over {} mask(s)",
                rows,
                masks.len()
            )));
        }
        let seq_len = rows / masks.len();
        for m in &masks {
            if m.rows() != seq_len || m.cols() != seq_len {
                return Err(Error::Parameter(format!(
                    "attention mask is {}x{}, need {seq_len}x{seq_len}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if heads == 0 || cols % heads != 0 {
            return Err(Error::Parameter(format!(
                "{cols} columns do not split into {heads} head(s)"
            )));
        }
        let op = BatchAttentionOp { q, k, v, masks, seq_len, heads, scale, attn_keep };
        let dh = op.head_width(cols);
        let mut out = Matrix::zeros(rows, cols);
        for b in 0..op.masks.len() {
            for h in 0..heads {
                let (_, _, vs, w) = op.weights(&self.values, b, h)?;
                let o = matmul(&op.dropped(&w, b, h), &vs)?;
                for r in 0..seq_len {
                    out.row_mut(b * seq_len + r)[h * dh..(h + 1) * dh].copy_from_slice(o.row(r));
                }
            }
        }
        Ok(self.push(Op::BatchAttention(Box::new(op)), out))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].shape() != (1, 1) {
            return Err(Error::Parameter(format!(
                "backward needs a scalar node, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        if !self.values[loss.0].is_finite() {
            return Err(Error::Numeric("non-finite loss in backward".to_string()));
        }
        self.grads = (0..self.ops.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            match &self.ops[i] {
                Op::Leaf => {
                    // keep for apply_grads / node_grad
                    self.grads[i] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let da = matmul_nt(&g, &self.values[b.0])?;
                    let db = matmul_tn(&self.values[a.0], &g)?;
                    let (a, b) = (*a, *b);
                    accumulate(&mut self.grads, a, da);
                    accumulate(&mut self.grads, b, db);
                }
                Op::MatmulNT(a, b) => {
                    let da = matmul(&g, &self.values[b.0])?;
                    let db = matmul_tn(&g, &self.values[a.0])?;
                    let (a, b) = (*a, *b);
                    accumulate(&mut self.grads, a, da);
                    accumulate(&mut self.grads, b, db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut self.grads, a, g.clone());
                    accumulate(&mut self.grads, b, g);
                }
                Op::AddRowBroadcast(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    let (a, bias) = (*a, *bias);
                    accumulate(&mut self.grads, a, g);
                    accumulate(&mut self.grads, bias, db);
                }
                Op::Scale(a, s) => {
                    let a = *a;
                    let da = g.scaled(*s);
                    accumulate(&mut self.grads, a, da);
                }
                Op::Relu(a) => {
                    let mut da = g;
                    for (dv, &x) in da.data_mut().iter_mut().zip(self.values[a.0].data()) {
                        if x <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    let a = *a;
                    accumulate(&mut self.grads, a, da);
                }
                Op::SoftmaxRows(a, _mask) => {
                    // dX = y .* (g - rowwise_dot(g, y)); masked entries have
                    // y == 0 and therefore zero gradient.
                    let y = &self.values[i];
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    let a = *a;
                    accumulate(&mut self.grads, a, da);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = &self.values[a.0];
                    let y = &self.values[i];
                    let n = x.cols() as f64;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let g_mean = gr.iter().sum::<f64>() / n;
                        let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                        for c in 0..x.cols() {
                            da.set(r, c, inv * (gr[c] - g_mean - yr[c] * gy_mean));
                        }
                    }
                    let a = *a;
                    accumulate(&mut self.grads, a, da);
                }
                Op::L2NormalizeRows(a, eps) => {
                    let x = &self.values[a.0];
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = g.row(r);
                        if norm > *eps {
                            let dot: f64 = xr.iter().zip(gr).map(|(x, g)| x * g).sum();
                            let s3 = norm * norm * norm;
                            for c in 0..x.cols() {
                                da.set(r, c, gr[c] / norm - xr[c] * dot / s3);
                            }
                        } else {
                            // the guard is active: y = x / eps
                            for c in 0..x.cols() {
                                da.set(r, c, gr[c] / eps);
                            }
                        }
                    }
                    let a = *a;
                    accumulate(&mut self.grads, a, da);
                }
                Op::GatherRows(a, indices) => {
                    let src = &self.values[a.0];
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (r, &idx) in indices.iter().enumerate() {
                        for (acc, v) in da.row_mut(idx).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    let a = *a;
                    accumulate(&mut self.grads, a, da);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.values[p.0].cols();
                        let rows = self.values[p.0].rows();
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(&mut self.grads, p, dp);
                        offset += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.values[p.0].rows();
                        let cols = self.values[p.0].cols();
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        accumulate(&mut self.grads, p, dp);
                        offset += rows;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let src = &self.values[a.0];
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        da.row_mut(r)[*start..*start + *len].copy_from_slice(g.row(r));
                    }
                    let a = *a;
                    accumulate(&mut self.grads, a, da);
                }
                Op::Dropout(a, keep, inv) => {
                    let mut da = g;
                    for (dv, &k) in da.data_mut().iter_mut().zip(keep) {
                        *dv = if k { *dv * *inv } else { 0.0 };
                    }
                    let a = *a;
                    accumulate(&mut self.grads, a, da);
                }
                Op::InfoNce(sim, tau) => {
                    // d/ds = (1/(n*tau)) * (softmax(s/tau) - I)
                    let s = &self.values[sim.0];
                    let n = s.rows();
                    let scaled = s.scaled(1.0 / tau);
                    let mut p = kernels::softmax_rows(&scaled, None)?;
                    let coeff = g.at(0, 0) / (n as f64 * tau);
                    for r in 0..n {
                        let row = p.row_mut(r);
                        row[r] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= coeff);
                    }
                    let sim = *sim;
                    accumulate(&mut self.grads, sim, p);
                }
                Op::CrossEntropyMean(logits, targets) => {
                    let x = &self.values[logits.0];
                    let mut p = kernels::softmax_rows(x, None)?;
                    let coeff = g.at(0, 0) / x.rows() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = p.row_mut(r);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= coeff);
                    }
                    let logits = *logits;
                    accumulate(&mut self.grads, logits, p);
                }
                Op::SumEntries(a) => {
                    let src = &self.values[a.0];
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    da.fill(g.at(0, 0));
                    let a = *a;
                    accumulate(&mut self.grads, a, da);
                }
                Op::SumSquares(a) => {
                    let da = self.values[a.0].scaled(2.0 * g.at(0, 0));
                    let a = *a;
                    accumulate(&mut self.grads, a, da);
                }
                Op::AddScaled(terms) => {
                    let terms = terms.clone();
                    for (c, t) in terms {
                        let dt = Matrix::from_vec(1, 1, vec![c * g.at(0, 0)])?;
                        accumulate(&mut self.grads, t, dt);
                    }
                }
                Op::BatchAttention(op) => {
                    let (rows, cols) = self.values[op.q.0].shape();
                    let n = op.seq_len;
                    let dh = op.head_width(cols);
                    let mut dq = Matrix::zeros(rows, cols);
                    let mut dk = Matrix::zeros(rows, cols);
                    let mut dv = Matrix::zeros(rows, cols);
                    for b in 0..op.masks.len() {
                        for h in 0..op.heads {
                            // recompute the forward intermediates rather than
                            // storing per-instance weight matrices on the tape
                            let (qs, ks, vs, w) = op.weights(&self.values, b, h)?;
                            let wd = op.dropped(&w, b, h);
                            let go = BatchAttentionOp::sub(&g, b * n, n, h * dh, dh);
                            let dvs = matmul_tn(&wd, &go)?;
                            let mut dw = matmul_nt(&go, &vs)?;
                            if let Some((keep, inv)) = &op.attn_keep {
                                let base = (b * op.heads + h) * n * n;
                                for (idx, val) in dw.data_mut().iter_mut().enumerate() {
                                    *val = if keep[base + idx] { *val * inv } else { 0.0 };
                                }
                            }
                            // softmax backward per row; masked entries have w == 0
                            let mut ds = Matrix::zeros(n, n);
                            for r in 0..n {
                                let wr = w.row(r);
                                let dr = dw.row(r);
                                let dot: f64 = wr.iter().zip(dr).map(|(w, d)| w * d).sum();
                                for (c, out) in ds.row_mut(r).iter_mut().enumerate() {
                                    *out = wr[c] * (dr[c] - dot);
                                }
                            }
                            ds.scale_in_place(op.scale);
                            let dqs = matmul(&ds, &ks)?;
                            let dks = matmul_tn(&ds, &qs)?;
                            for r in 0..n {
                                let span = h * dh..(h + 1) * dh;
                                let row = b * n + r;
                                for (acc, val) in dq.row_mut(row)[span.clone()].iter_mut().zip(dqs.row(r)) {
                                    *acc += val;
                                }
                                for (acc, val) in dk.row_mut(row)[span.clone()].iter_mut().zip(dks.row(r)) {
                                    *acc += val;
                                }
                                for (acc, val) in dv.row_mut(row)[span].iter_mut().zip(dvs.row(r)) {
                                    *acc += val;
                                }
                            }
                        }
                    }
                    let (q, k, v) = (op.q, op.k, op.v);
                    accumulate(&mut self.grads, q, dq);
                    accumulate(&mut self.grads, k, dk);
                    accumulate(&mut self.grads, v, dv);
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated at a node during the last backward pass.
    pub fn node_grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Add every parameter leaf's gradient into the store (+=).
    pub fn apply_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (&param, &node) in &self.param_leaves {
            if let Some(g) = self.grads.get(node.0).and_then(Option::as_ref) {
                store.accumulate_grad(param, g)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: NodeId, delta: Matrix) {
    match &mut grads[idx.0] {
        Some(g) => g
            .add_assign(&delta)
            .expect("gradient shape mismatch on accumulate"),
        slot @ None => *slot = Some(delta),
    }
}
