//! Bidirectional multi-head scaled dot-product self-attention.
//!
//! Per head `h` with width `d = D / heads`, scores are
//! `(X Wq_h)(X Wk_h)^T / sqrt(d)`; keys outside the validity mask are
//! excluded before the row softmax. Head outputs `softmax(scores) X Wv_h`
//! are concatenated and projected by `Wo`.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::layers::softmax_in_place;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The four projections of one attention block.
#[derive(Clone, Copy)]
pub struct AttentionWeights<'a, T> {
    pub wq: &'a Array2<T>,
    pub wk: &'a Array2<T>,
    pub wv: &'a Array2<T>,
    pub wo: &'a Array2<T>,
}

pub struct AttentionGrads<'a, T> {
    pub wq: &'a mut Array2<T>,
    pub wk: &'a mut Array2<T>,
    pub wv: &'a mut Array2<T>,
    pub wo: &'a mut Array2<T>,
}

pub struct AttentionCache<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// One `(len, len)` attention matrix per head.
    pub probs: Vec<Array2<T>>,
    concat: Array2<T>,
}

pub fn msa_forward<T: Scalar>(
    x: &ArrayView2<T>,
    weights: AttentionWeights<'_, T>,
    num_heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Array2<T>, AttentionCache<T>)> {
    let (len, dim) = x.dim();
    if num_heads == 0 || dim % num_heads != 0 {
        return Err(Error::config(format!(
            "width {dim} is not divisible by {num_heads} heads"
        )));
    }
    if let Some(m) = mask {
        if m.len() != len {
            return Err(Error::shape(format!(
                "mask length {} differs from sequence length {len}",
                m.len()
            )));
        }
        if !m.iter().any(|&v| v) {
            return Err(Error::Domain(
                "attention mask excludes every position".to_string(),
            ));
        }
    }
    let head = dim / num_heads;
    let scale = T::one() / T::lit(head as f64).sqrt();

    let q = x.dot(weights.wq);
    let k = x.dot(weights.wk);
    let v = x.dot(weights.wv);
    let mut concat = Array2::zeros((len, dim));
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let cols = s![.., h * head..(h + 1) * head];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for row in scores.rows_mut() {
            softmax_in_place(row, mask);
        }
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let out = concat.dot(weights.wo);
    Ok((
        out,
        AttentionCache {
            input: x.to_owned(),
            q,
            k,
            v,
            probs,
            concat,
        },
    ))
}

/// Accumulates projection gradients and returns `d x`.
pub fn msa_backward<T: Scalar>(
    d_out: &ArrayView2<T>,
    cache: &AttentionCache<T>,
    weights: AttentionWeights<'_, T>,
    grads: AttentionGrads<'_, T>,
) -> Array2<T> {
    let (len, dim) = cache.input.dim();
    let num_heads = cache.probs.len();
    let head = dim / num_heads;
    let scale = T::one() / T::lit(head as f64).sqrt();

    *grads.wo += &cache.concat.t().dot(d_out);
    let d_concat = d_out.dot(&weights.wo.t());

    let mut dq = Array2::zeros((len, dim));
    let mut dk = Array2::zeros((len, dim));
    let mut dv = Array2::zeros((len, dim));
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * head..(h + 1) * head];
        let d_head = d_concat.slice(cols);
        let d_p = d_head.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&d_head));
        // Softmax Jacobian per row: dS = P * (dP - rowsum(dP * P)).
        let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_scores = p * &(&d_p - &row_dot) * scale;
        dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
    }

    let xt = cache.input.t();
    *grads.wq += &xt.dot(&dq);
    *grads.wk += &xt.dot(&dk);
    *grads.wv += &xt.dot(&dv);
    dq.dot(&weights.wq.t()) + dk.dot(&weights.wk.t()) + dv.dot(&weights.wv.t())
}
