//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use ndarray::{Array2, Array3, ArrayViewD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stenosis_core::dataset::CenterlineSequences;
use stenosis_core::model::{batch_loss, model_gradients, ModelConfig, ModelParams};
use stenosis_core::sampling::VolumeSequence;
use stenosis_core::Scalar;

/// Small model for cubes of side `side`: widths 4..32, one encoder.
pub fn small_model(side: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        cube_side: side,
        max_seq_len,
        conv_filters: vec![4, 8, 16, 32],
        num_encoders: 1,
        num_heads: 2,
        ..ModelConfig::default()
    }
}

pub fn random_cube<T: Scalar>(side: usize, rng: &mut ChaCha8Rng) -> Array3<T> {
    Array3::from_shape_simple_fn((side, side, side), || T::lit(rng.sample::<f64, _>(StandardNormal)))
}

pub fn random_sequence<T: Scalar>(len: usize, side: usize, seed: u64) -> VolumeSequence<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VolumeSequence {
        cubes: (0..len).map(|_| random_cube(side, &mut rng)).collect(),
        center_indices: (0..len).map(|i| 5 * i).collect(),
        labels: (0..len).map(|i| i % 2 == 1).collect(),
        source_id: format!("random{seed}"),
    }
}

pub fn cast_sequence<T: Scalar, U: Scalar>(seq: &VolumeSequence<T>) -> VolumeSequence<U> {
    VolumeSequence {
        cubes: seq.cubes.iter().map(|c| c.mapv(|v| U::lit(v.as_f64()))).collect(),
        center_indices: seq.center_indices.clone(),
        labels: seq.labels.clone(),
        source_id: seq.source_id.clone(),
    }
}

pub fn cast_params<T: Scalar, U: Scalar>(params: &ModelParams<T>, config: &ModelConfig) -> ModelParams<U> {
    let mut out = ModelParams::<U>::zeros(config).unwrap();
    for ((_, mut dst), (_, src)) in out.named_tensors_mut().into_iter().zip(params.named_tensors()) {
        dst.zip_mut_with(&src, |d, &s| *d = U::lit(s.as_f64()));
    }
    out
}

fn flat_get<T: Scalar>(view: &ArrayViewD<'_, T>, idx: usize) -> f64 {
    view.iter().nth(idx).unwrap().as_f64()
}

fn nudge(params: &ModelParams<f64>, name: &str, idx: usize, delta: f64) -> ModelParams<f64> {
    let mut p = params.clone();
    let mut tensors = p.named_tensors_mut();
    let (_, view) = tensors.iter_mut().find(|(n, _)| n == name).unwrap();
    *view.iter_mut().nth(idx).unwrap() += delta;
    drop(tensors);
    p
}

/// Relative error of one parameter group over the sampled entries.
#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub extended: f64,
    pub standard: f64,
    pub entries: usize,
}

/// `||a - b|| / max(||a||, ||b||)` (0 when both vanish).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares analytic gradients (f64 and f32) with f64 central differences
/// on up to `samples` entries of every parameter tensor.
pub fn gradient_check(config: &ModelConfig, samples: usize, seed: u64) -> Vec<GroupError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(config, seed).unwrap();
    // Non-trivial biases and LN parameters so every group carries signal.
    for (name, mut t) in params.named_tensors_mut() {
        if name.ends_with("bias") || name.contains(".b") || name.contains("ln") {
            t.mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
        }
    }
    let side = config.cube_side;
    let lens = [config.max_seq_len, config.max_seq_len.saturating_sub(1).max(1)];
    let batch64: Vec<VolumeSequence<f64>> = lens
        .iter()
        .enumerate()
        .map(|(i, &l)| random_sequence(l, side, seed * 31 + i as u64))
        .collect();
    let batch32: Vec<VolumeSequence<f32>> = batch64.iter().map(cast_sequence).collect();
    let weights = [1.0, 1.7];

    let analytic64 = model_gradients(&batch64, &params, config, weights).unwrap().grads;
    let params32 = cast_params::<f64, f32>(&params, config);
    let analytic32 = model_gradients(&batch32, &params32, config, weights).unwrap().grads;
    let loss = |p: &ModelParams<f64>| batch_loss(&batch64, p, config, weights).unwrap();

    let h = 1e-6;
    let a64 = analytic64.named_tensors();
    let a32 = analytic32.named_tensors();
    params
        .named_tensors()
        .iter()
        .zip(a64.iter().zip(&a32))
        .map(|((name, tensor), ((_, g64), (_, g32)))| {
            let n = tensor.len();
            let picks: Vec<usize> = if n <= samples {
                (0..n).collect()
            } else {
                (0..samples).map(|_| rng.random_range(0..n)).collect()
            };
            let (mut fd, mut an64, mut an32) = (Vec::new(), Vec::new(), Vec::new());
            for &i in &picks {
                let plus = loss(&nudge(&params, name, i, h));
                let minus = loss(&nudge(&params, name, i, -h));
                fd.push((plus - minus) / (2.0 * h));
                an64.push(flat_get(g64, i));
                an32.push(flat_get(g32, i));
            }
            GroupError {
                name: name.clone(),
                extended: relative_error(&an64, &fd),
                standard: relative_error(&an32, &fd),
                entries: picks.len(),
            }
        })
        .collect()
}

/// Label decided by mean cube intensity: positives are bright, negatives dark.
pub fn toy_cube(side: usize, positive: bool, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let level = if positive { 1.0 } else { -1.0 } * rng.random_range(0.5..1.5f32);
    Array3::from_shape_simple_fn((side, side, side), || level + rng.random_range(-0.3..0.3f32))
}

/// A linearly separable corpus: every center owns a run of `stride`
/// annotation voxels carrying its label.
pub fn toy_corpus(
    centerlines: usize,
    centers: usize,
    side: usize,
    max_seq_len: usize,
    seed: u64,
) -> Vec<CenterlineSequences<f32>> {
    let stride = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..centerlines)
        .map(|k| {
            let id = format!("toy{k:03}");
            let labels: Vec<bool> = (0..centers).map(|_| rng.random_bool(0.3)).collect();
            let cubes: Vec<Array3<f32>> = labels.iter().map(|&l| toy_cube(side, l, &mut rng)).collect();
            let truth: Vec<bool> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, stride)).collect();
            let mut sequences = Vec::new();
            for start in (0..centers).step_by(max_seq_len) {
                let end = (start + max_seq_len).min(centers);
                sequences.push(VolumeSequence {
                    cubes: cubes[start..end].to_vec(),
                    center_indices: (start..end).map(|i| i * stride).collect(),
                    labels: labels[start..end].to_vec(),
                    source_id: id.clone(),
                });
            }
            CenterlineSequences {
                id,
                truth,
                train: sequences.clone(),
                eval: sequences,
            }
        })
        .collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}
