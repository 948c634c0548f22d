//! Forward kernels and the matching backward helpers used by [`super::Tape`].
//!
//! Every function here is pure: inputs are borrowed, outputs are fresh
//! tensors. Matrices are addressed as `rows() x cols()`, so any leading
//! dimensions fold into the row count.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Layer-norm epsilon used by the transformer blocks.
pub const LAYER_NORM_EPS: f64 = 1e-12;

fn shape_error<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn with_last_dim(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

/// `a[.. x k] * b[k x n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.shape().len() != 2 || a.cols() != b.shape()[0] {
        return Err(shape_error("matmul", a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(with_last_dim(a.shape(), n));
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        k,
        1,
        b.data(),
        n,
        1,
        T::zero(),
        out.data_mut(),
        n,
        1,
    );
    Ok(out)
}

/// Gradients of `a * b` given the upstream gradient of the product.
pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let da = need_a.then(|| {
        let mut da = Tensor::zeros(a.shape().to_vec());
        // dA = dC * B^T
        T::gemm(m, n, k, T::one(), grad.data(), n, 1, b.data(), 1, n, T::zero(), da.data_mut(), k, 1);
        da
    });
    let db = need_b.then(|| {
        let mut db = Tensor::zeros(b.shape().to_vec());
        // dB = A^T * dC
        T::gemm(k, m, n, T::one(), a.data(), 1, k, grad.data(), n, 1, T::zero(), db.data_mut(), n, 1);
        db
    });
    (da, db)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_error("add", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_error("mul", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds a bias vector to every row.
pub fn add_row<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.cols();
    if bias.len() != c {
        return Err(shape_error("add_row", x, bias));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub(crate) fn column_sums<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let c = x.cols();
    let mut sums = vec![T::zero(); c];
    for row in x.data().chunks(c.max(1)) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_inner<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    c * (x + T::lit(GELU_COEF) * x * x * x)
}

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    x.map(|v| half * v * (T::one() + gelu_inner(v).tanh()))
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let t = gelu_inner(x).tanh();
    let inner_d = c * (T::one() + T::lit(3.0 * GELU_COEF) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * inner_d
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Per-row statistics kept for the backward pass.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_cached<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gain.len() != d {
        return Err(shape_error("layer_norm", x, gain));
    }
    if bias.len() != d {
        return Err(shape_error("layer_norm", x, bias));
    }
    if eps <= T::zero() {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    let n = T::lit(d as f64);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.rows());
    for (r, row) in x.data().chunks(d.max(1)).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let base = r * d;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[base + j] = h;
            out.data_mut()[base + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, rstd }))
}

/// Normalizes each row to zero mean and unit variance, then applies
/// `gain * x + bias`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_cached(x, gain, bias, eps).map(|(out, _)| out)
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    grad: &Tensor<T>,
    gain: &Tensor<T>,
    cache: &LayerNormCache<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = grad.cols();
    let n = T::lit(d as f64);
    let mut dx = Tensor::zeros(grad.shape().to_vec());
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, gy) in grad.data().chunks(d.max(1)).enumerate() {
        let base = r * d;
        let xh = &cache.xhat[base..base + d];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            dgain[j] += gy[j] * xh[j];
            dbias[j] += gy[j];
            dxhat[j] = gy[j] * gain.data()[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xh[j];
        }
        let scale = cache.rstd[r] / n;
        for j in 0..d {
            dx.data_mut()[base + j] = scale * (n * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        // fully masked row: no attention mass anywhere
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols().max(1);
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let c = y.cols().max(1);
    let mut dx = Tensor::zeros(y.shape().to_vec());
    for ((yr, gr), dr) in y
        .data()
        .chunks(c)
        .zip(grad.data().chunks(c))
        .zip(dx.data_mut().chunks_mut(c))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..yr.len() {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

/// Gathers rows of a `V x d` table.
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if table.shape().len() != 2 {
        return Err(Error::contract(format!(
            "embedding table must be 2-D, got {:?}",
            table.shape()
        )));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Index {
                what: "embedding table",
                index: id,
                len: v,
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], data)
}

pub(crate) fn scatter_rows<T: Scalar>(shape: &[usize], ids: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(shape.to_vec());
    let d = shape[1];
    for (i, &id) in ids.iter().enumerate() {
        let src = &grad.data()[i * d..(i + 1) * d];
        let dst = &mut out.data_mut()[id * d..(id + 1) * d];
        for (a, &b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
    out
}

/// Joins two matrices with equal row counts side by side.
pub fn concat_cols<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rows() != b.rows() {
        return Err(shape_error("concat_cols", a, b));
    }
    let (ca, cb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.rows() * (ca + cb));
    for r in 0..a.rows() {
        data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    Tensor::new(vec![a.rows(), ca + cb], data)
}

/// Layout of a batch of sequences flattened to `(batch * seq) x hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

/// Scaled dot-product attention over all heads.
///
/// `q`, `k`, `v` are `(batch * seq) x d`; `key_mask[b * seq + j]` is false
/// for padded keys, which receive zero attention weight. Returns the
/// attended values and the attention probabilities laid out as
/// `batch x heads x seq x seq`.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    key_mask: &[bool],
    shape: AttentionShape,
) -> Result<(Tensor<T>, Vec<T>)> {
    let AttentionShape { batch, seq, heads } = shape;
    let d = q.cols();
    if k.shape() != q.shape() {
        return Err(shape_error("attention", q, k));
    }
    if v.shape() != q.shape() {
        return Err(shape_error("attention", q, v));
    }
    if q.rows() != batch * seq || key_mask.len() != batch * seq {
        return Err(Error::contract(format!(
            "attention expects {batch}x{seq} rows and mask entries, got {} rows and {} mask entries",
            q.rows(),
            key_mask.len()
        )));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("hidden {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut out = Tensor::zeros(q.shape().to_vec());
    for b in 0..batch {
        let mask = &key_mask[b * seq..(b + 1) * seq];
        for h in 0..heads {
            let off = b * seq * d + h * dh;
            let p_off = (b * heads + h) * seq * seq;
            let p = &mut probs[p_off..p_off + seq * seq];
            // S = Q K^T * scale
            T::gemm(seq, dh, seq, scale, &q.data()[off..], d, 1, &k.data()[off..], 1, d, T::zero(), p, seq, 1);
            for row in p.chunks_mut(seq) {
                for (s, &keep) in row.iter_mut().zip(mask) {
                    if !keep {
                        *s = T::neg_infinity();
                    }
                }
                softmax_in_place(row);
            }
            T::gemm(seq, seq, dh, T::one(), p, seq, 1, &v.data()[off..], d, 1, T::zero(), &mut out.data_mut()[off..], d, 1);
        }
    }
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)` for [`multi_head_attention`].
pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    shape: AttentionShape,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let AttentionShape { batch, seq, heads } = shape;
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut dv = Tensor::zeros(v.shape().to_vec());
    let mut dp = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * d + h * dh;
            let p_off = (b * heads + h) * seq * seq;
            let p = &probs[p_off..p_off + seq * seq];
            let g = &grad.data()[off..];
            // dP = dO V^T
            T::gemm(seq, dh, seq, T::one(), g, d, 1, &v.data()[off..], 1, d, T::zero(), &mut dp, seq, 1);
            // dV += P^T dO
            T::gemm(seq, seq, dh, T::one(), p, 1, seq, g, d, 1, T::one(), &mut dv.data_mut()[off..], d, 1);
            // dS = P * (dP - rowsum(dP * P)), written over dp
            for (pr, dr) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..seq {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            // dQ += scale dS K ; dK += scale dS^T Q
            T::gemm(seq, seq, dh, scale, &dp, seq, 1, &k.data()[off..], d, 1, T::one(), &mut dq.data_mut()[off..], d, 1);
            T::gemm(seq, seq, dh, scale, &dp, 1, seq, &q.data()[off..], d, 1, T::one(), &mut dk.data_mut()[off..], d, 1);
        }
    }
    (dq, dk, dv)
}

/// Clamp bounds applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean over samples of `w * -[y ln p + (1 - y) ln(1 - p)]`.
pub fn weighted_bce<T: Scalar>(probs: &[T], labels: &[T], weights: &[T]) -> Result<T> {
    if probs.len() != labels.len() || probs.len() != weights.len() {
        return Err(Error::contract(format!(
            "bce length mismatch: {} probs, {} labels, {} weights",
            probs.len(),
            labels.len(),
            weights.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::contract("bce over an empty batch"));
    }
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let total: T = probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&p, &y), &w)| {
            let p = p.max(lo).min(hi);
            -w * (y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    Ok(total / T::lit(probs.len() as f64))
}

pub(crate) fn weighted_bce_backward<T: Scalar>(probs: &[T], labels: &[T], weights: &[T], upstream: T) -> Vec<T> {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let n = T::lit(probs.len() as f64);
    probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&p, &y), &w)| {
            let p = p.max(lo).min(hi);
            upstream * w * (-y / p + (T::one() - y) / (T::one() - p)) / n
        })
        .collect()
}
