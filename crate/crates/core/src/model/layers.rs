//! Row-wise building blocks shared by the encoder and the classifier.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};

use super::params::LayerNormParams;
use crate::scalar::Scalar;

/// In-place numerically stable softmax of one row; entries with
/// `valid[j] == false` get probability 0. Returns false if no entry is valid.
pub fn softmax_in_place<T: Scalar>(mut row: ArrayViewMut1<T>, valid: Option<&[bool]>) -> bool {
    let is_valid = |j: usize| valid.is_none_or(|v| v[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if is_valid(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if is_valid(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    row.mapv_inplace(|v| v / sum);
    true
}

pub fn softmax_rows<T: Scalar>(logits: &ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for row in out.rows_mut() {
        softmax_in_place(row, None);
    }
    out
}

/// Cached statistics of a layer-norm forward pass.
pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNormCache<T> {
    /// Rows before scale and shift.
    pub fn normalized(&self) -> &Array2<T> {
        &self.normalized
    }
}

/// Normalizes each row to zero mean and unit variance, then applies the
/// learned scale and shift.
pub fn layer_norm_forward<T: Scalar>(
    x: &ArrayView2<T>,
    ln: &LayerNormParams<T>,
    eps: T,
) -> (Array2<T>, LayerNormCache<T>) {
    let d = T::lit(x.ncols() as f64);
    let mut normalized = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *s = T::one() / (var + eps).sqrt();
        let scale = *s;
        row.mapv_inplace(|v| v * scale);
    }
    let out = &normalized * &ln.scale + &ln.shift;
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Returns `d x` and accumulates the scale/shift gradients into `grad`.
pub fn layer_norm_backward<T: Scalar>(
    d_out: &ArrayView2<T>,
    cache: &LayerNormCache<T>,
    ln: &LayerNormParams<T>,
    grad: &mut LayerNormParams<T>,
) -> Array2<T> {
    grad.scale += &(d_out * &cache.normalized).sum_axis(Axis(0));
    grad.shift += &d_out.sum_axis(Axis(0));

    let d = T::lit(d_out.ncols() as f64);
    let d_norm = d_out * &ln.scale;
    let mut dx = Array2::zeros(d_out.raw_dim());
    Zip::from(dx.rows_mut())
        .and(d_norm.rows())
        .and(cache.normalized.rows())
        .and(&cache.inv_std)
        .for_each(|mut dx_row, g, xhat, &inv_std| {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xhat) / d;
            Zip::from(&mut dx_row)
                .and(&g)
                .and(&xhat)
                .for_each(|o, &gi, &xi| *o = inv_std * (gi - mean_g - xi * mean_gx));
        });
    dx
}

/// `x W + b`.
pub fn linear<T: Scalar>(x: &ArrayView2<T>, weight: &Array2<T>, bias: &Array1<T>) -> Array2<T> {
    let mut out = x.dot(weight);
    out += bias;
    out
}

/// Accumulates `d W += x^T d_out`, `d b += sum_rows(d_out)` and returns `d x`.
pub fn linear_backward<T: Scalar>(
    d_out: &ArrayView2<T>,
    x: &ArrayView2<T>,
    weight: &Array2<T>,
    d_weight: &mut Array2<T>,
    d_bias: &mut Array1<T>,
) -> Array2<T> {
    *d_weight += &x.t().dot(d_out);
    *d_bias += &d_out.sum_axis(Axis(0));
    d_out.dot(&weight.t())
}

pub fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v.max(T::zero()))
}

/// Zeroes gradient entries whose pre-activation was not positive.
pub fn relu_backward<T: Scalar>(d_out: &mut Array2<T>, pre: &Array2<T>) {
    d_out.zip_mut_with(pre, |g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
}

pub fn row_mean_and_variance<T: Scalar>(row: ArrayView1<T>) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.sum() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var)
}
