//! Shallow 3D-CNN: four stages of same-padded 3x3x3 convolution, ReLU and
//! 2x2x2 max-pooling (floor division on odd sides).
//!
//! Feature maps are channels-last matrices of shape `(side^3, channels)`
//! whose rows enumerate voxels in `(z, y, x)` row-major order.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use super::config::ModelConfig;
use super::params::{ConvParams, ModelParams, TAPS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Builds the `(side^3, 27 * channels)` patch matrix of a same-padded 3x3x3
/// convolution; column `tap * channels + c`.
pub fn im2col<T: Scalar>(input: &ArrayView2<T>, side: usize) -> Array2<T> {
    let channels = input.ncols();
    let voxels = side * side * side;
    let mut cols = Array2::<T>::zeros((voxels, TAPS * channels));
    let s = side as isize;
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let v = ((z * s + y) * s + x) as usize;
                let mut row = cols.row_mut(v);
                let row = row.as_slice_mut().expect("rows of a fresh array are contiguous");
                for kz in 0..3isize {
                    let zz = z + kz - 1;
                    if zz < 0 || zz >= s {
                        continue;
                    }
                    for ky in 0..3isize {
                        let yy = y + ky - 1;
                        if yy < 0 || yy >= s {
                            continue;
                        }
                        for kx in 0..3isize {
                            let xx = x + kx - 1;
                            if xx < 0 || xx >= s {
                                continue;
                            }
                            let tap = ((kz * 3 + ky) * 3 + kx) as usize;
                            let src = ((zz * s + yy) * s + xx) as usize;
                            let dst = &mut row[tap * channels..(tap + 1) * channels];
                            for (d, &v) in dst.iter_mut().zip(input.row(src).iter()) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto voxels.
pub fn col2im<T: Scalar>(cols: &ArrayView2<T>, side: usize, channels: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((side * side * side, channels));
    let s = side as isize;
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let v = ((z * s + y) * s + x) as usize;
                let row = cols.row(v);
                for kz in 0..3isize {
                    let zz = z + kz - 1;
                    if zz < 0 || zz >= s {
                        continue;
                    }
                    for ky in 0..3isize {
                        let yy = y + ky - 1;
                        if yy < 0 || yy >= s {
                            continue;
                        }
                        for kx in 0..3isize {
                            let xx = x + kx - 1;
                            if xx < 0 || xx >= s {
                                continue;
                            }
                            let tap = ((kz * 3 + ky) * 3 + kx) as usize;
                            let dst = ((zz * s + yy) * s + xx) as usize;
                            let src = row.slice(s![tap * channels..(tap + 1) * channels]);
                            out.row_mut(dst).zip_mut_with(&src, |a, &b| *a += b);
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2x2 max-pooling with floor division; returns the pooled map and, per
/// output element, the flat index (`voxel * channels + c`) of the winner.
pub fn max_pool<T: Scalar>(input: &ArrayView2<T>, side: usize) -> (Array2<T>, Vec<usize>) {
    let channels = input.ncols();
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout is contiguous");
    let out_side = side / 2;
    let out_voxels = out_side * out_side * out_side;
    let mut out = vec![T::zero(); out_voxels * channels];
    let mut argmax = vec![0usize; out_voxels * channels];
    for pz in 0..out_side {
        for py in 0..out_side {
            for px in 0..out_side {
                let o = (pz * out_side + py) * out_side + px;
                let best = &mut out[o * channels..(o + 1) * channels];
                let best_idx = &mut argmax[o * channels..(o + 1) * channels];
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = ((2 * pz + dz) * side + 2 * py + dy) * side + 2 * px + dx;
                            let row = &src[v * channels..(v + 1) * channels];
                            let first = dz + dy + dx == 0;
                            for c in 0..channels {
                                if first || row[c] > best[c] {
                                    best[c] = row[c];
                                    best_idx[c] = v * channels + c;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Array2::from_shape_vec((out_voxels, channels), out).expect("sized above");
    (out, argmax)
}

/// Same-padded 3x3x3 convolution of a channels-last map. Returns the output
/// and the patch matrix needed by the backward pass.
pub fn conv3d<T: Scalar>(
    input: &ArrayView2<T>,
    side: usize,
    conv: &ConvParams<T>,
) -> (Array2<T>, Array2<T>) {
    let cols = im2col(input, side);
    let mut out = cols.dot(&conv.weight.t());
    out += &conv.bias;
    (out, cols)
}

struct StageCache<T> {
    side: usize,
    cols: Array2<T>,
    pre_activation: Array2<T>,
    argmax: Vec<usize>,
}

/// Intermediate values of one cube's forward pass.
pub struct CnnCache<T> {
    stages: Vec<StageCache<T>>,
    out_side: usize,
    out_channels: usize,
}

pub struct CnnOutput<T> {
    /// Final feature map `x` with shape `(C, H^3)`.
    pub feature_map: Array2<T>,
    /// Row-major flattening of the `C x H x H x H` map, length `D`.
    pub features: Array1<T>,
}

/// Runs the four stages on one cube.
pub fn cnn_forward<T: Scalar>(
    cube: &Array3<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(CnnOutput<T>, CnnCache<T>)> {
    let n = config.cube_side;
    if cube.dim() != (n, n, n) {
        return Err(Error::shape(format!(
            "cube has shape {:?}, expected ({n}, {n}, {n})",
            cube.dim()
        )));
    }
    if config.feature_side() == 0 {
        return Err(Error::config(format!(
            "cube_side {n} is too small for four pooling stages"
        )));
    }
    let mean = T::lit(config.input_mean);
    let inv_std = T::lit(1.0 / config.input_std);
    let mut x = Array2::from_shape_vec(
        (n * n * n, 1),
        cube.iter().map(|&v| (v - mean) * inv_std).collect(),
    )
    .expect("cube has n^3 elements");

    let mut side = n;
    let mut stages = Vec::with_capacity(params.conv.len());
    for conv in &params.conv {
        let (pre, cols) = conv3d(&x.view(), side, conv);
        let act = pre.mapv(|v| v.max(T::zero()));
        let (pooled, argmax) = max_pool(&act.view(), side);
        stages.push(StageCache {
            side,
            cols,
            pre_activation: pre,
            argmax,
        });
        x = pooled;
        side /= 2;
    }

    let feature_map = x.t().to_owned();
    let features = Array1::from_iter(feature_map.iter().copied());
    let out_channels = feature_map.nrows();
    Ok((
        CnnOutput {
            feature_map,
            features,
        },
        CnnCache {
            stages,
            out_side: side,
            out_channels,
        },
    ))
}

/// Accumulates parameter gradients of one cube given `d features`.
pub fn cnn_backward<T: Scalar>(
    d_features: &ndarray::ArrayView1<T>,
    cache: &CnnCache<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
) {
    let voxels = cache.out_side.pow(3);
    // (C, H^3) row-major -> channels-last (H^3, C)
    let mut d_out = d_features
        .to_owned()
        .into_shape_with_order((cache.out_channels, voxels))
        .expect("feature length is C * H^3")
        .t()
        .to_owned();

    for (k, stage) in cache.stages.iter().enumerate().rev() {
        let mut d_pre = Array2::<T>::zeros(stage.pre_activation.raw_dim());
        {
            let flat = d_pre.as_slice_mut().expect("fresh array is contiguous");
            for (&idx, &g) in stage.argmax.iter().zip(d_out.iter()) {
                flat[idx] += g;
            }
        }
        d_pre.zip_mut_with(&stage.pre_activation, |g, &p| {
            if p <= T::zero() {
                *g = T::zero();
            }
        });

        let grad = &mut grads.conv[k];
        grad.weight += &d_pre.t().dot(&stage.cols);
        grad.bias += &d_pre.sum_axis(Axis(0));

        if k > 0 {
            let d_cols = d_pre.dot(&params.conv[k].weight);
            let in_channels = d_cols.ncols() / TAPS;
            d_out = col2im(&d_cols.view(), stage.side, in_channels);
        }
    }
}
