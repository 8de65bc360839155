//! Forward kernels shared by the direct API and the autodiff graph.
//!
//! All softmax-family kernels are stabilized by row-max subtraction.

use super::matrix::{matmul, matmul_nt, MaskMatrix, Matrix};
use crate::error::{Error, Result};

/// Row-wise softmax. Masked entries are exactly 0 and excluded from the
/// normalization; a fully masked row is an error.
pub fn softmax_rows(m: &Matrix, mask: Option<&MaskMatrix>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return Err(Error::shape("softmax_rows mask", m.shape(), mask.shape()));
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let keep = |c: usize| mask.map_or(true, |mk| mk.at(r, c));
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if keep(c) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut sum = 0.0;
        let orow = out.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            if keep(c) {
                let e = (v - max).exp();
                orow[c] = e;
                sum += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Scaled dot-product attention: softmax(q k^T * scale) v, with an optional
/// causal mask. Row i of a causal output only sees k/v rows <= i.
pub fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal: bool,
    scale: f64,
) -> Result<Matrix> {
    attention_masked(q, k, v, causal_mask(q.rows(), k.rows(), causal).as_ref(), scale)
}

fn causal_mask(q_rows: usize, k_rows: usize, causal: bool) -> Option<MaskMatrix> {
    causal.then(|| MaskMatrix::from_fn(q_rows, k_rows, |i, j| j <= i))
}

/// Attention with an arbitrary (query, key) visibility mask.
pub fn attention_masked(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&MaskMatrix>,
    scale: f64,
) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("attention k/v", k.shape(), v.shape()));
    }
    let scores = matmul_nt(q, k)?.scaled(scale);
    let weights = softmax_rows(&scores, mask)?;
    matmul(&weights, v)
}

/// Point-wise feed-forward: relu(h w1 + b1) w2 + b2, biases broadcast per row.
pub fn ffn(
    h: &Matrix,
    w1: &Matrix,
    b1: &Matrix,
    w2: &Matrix,
    b2: &Matrix,
) -> Result<Matrix> {
    if h.cols() != w1.rows() {
        return Err(Error::shape("ffn h/w1", h.shape(), w1.shape()));
    }
    if w1.cols() != w2.rows() {
        return Err(Error::shape("ffn w1/w2", w1.shape(), w2.shape()));
    }
    let mut hidden = add_row_broadcast(&matmul(h, w1)?, b1)?;
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    add_row_broadcast(&matmul(&hidden, w2)?, b2)
}

/// m + bias where bias is 1 x cols, added to every row.
pub fn add_row_broadcast(m: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows() != 1 || bias.cols() != m.cols() {
        return Err(Error::shape("row broadcast", m.shape(), bias.shape()));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (x, b) in row.iter_mut().zip(bias.row(0)) {
            *x += b;
        }
    }
    Ok(out)
}

/// Each row divided by max(||row||, eps); the eps guard keeps zero rows zero.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Result<Matrix> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("l2 normalize eps must be > 0, got {eps}")));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        row.iter_mut().for_each(|v| *v /= denom);
    }
    Ok(out)
}

/// InfoNCE over a square similarity matrix with diagonal positives:
/// -(1/n) sum_i log(exp(s_ii/tau) / sum_j exp(s_ij/tau)).
pub fn info_nce(sim: &Matrix, tau: f64) -> Result<f64> {
    if sim.rows() != sim.cols() || sim.rows() == 0 {
        return Err(Error::shape("info_nce", sim.shape(), (sim.rows(), sim.rows())));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Parameter(format!(
            "info_nce temperature must be in (0, 1], got {tau}"
        )));
    }
    let n = sim.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row = sim.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
        let lse = max
            + row
                .iter()
                .map(|&v| (v / tau - max).exp())
                .sum::<f64>()
                .ln();
        total += lse - row[i] / tau;
    }
    Ok(total / n as f64)
}

/// Mean over rows of -log softmax(logits)[target], via stabilized log-sum-exp.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::Parameter(format!(
            "cross_entropy expects one target per row: {} targets for {} rows",
            targets.len(),
            logits.rows()
        )));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::Index(format!(
                "cross_entropy target {t} out of range for {} classes (row {r})",
                logits.cols()
            )));
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / logits.rows() as f64)
}

/// Row-wise layer normalization without learned affine parameters.
pub fn layer_norm_rows(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    let n = m.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}
