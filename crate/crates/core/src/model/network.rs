//! Full forward pass and exact gradients for whole sequences.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::cnn::{cnn_backward, cnn_forward, CnnCache};
use super::config::ModelConfig;
use super::encoder::{encoder_backward, encoder_forward, EncoderCache};
use super::layers::{layer_norm_backward, layer_norm_forward, linear, linear_backward, softmax_rows, LayerNormCache};
use super::params::{ClassifierParams, ModelParams};
use crate::error::{Error, Result};
use crate::sampling::VolumeSequence;
use crate::scalar::Scalar;

/// Smallest probability fed to the logarithm of the loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Class probabilities for every position of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSequence {
    /// One probability row per position; column 1 is significant stenosis.
    pub probabilities: Vec<Vec<f64>>,
    pub center_indices: Vec<usize>,
    pub source_id: String,
}

impl PredictionSequence {
    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Arg-max labels; `true` is significant stenosis.
    pub fn predicted_labels(&self) -> Vec<bool> {
        self.probabilities
            .iter()
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                best.0 == 1
            })
            .collect()
    }
}

/// Sequence embeddings padded to a fixed length with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<T> {
    pub matrix: Array2<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> EmbeddingSequence<T> {
    /// Zero-pads `matrix` to `padded_len` rows.
    pub fn padded(matrix: &ArrayView2<T>, padded_len: usize) -> Result<Self> {
        let (len, dim) = matrix.dim();
        if len > padded_len {
            return Err(Error::SequenceTooLong {
                len,
                max: padded_len,
            });
        }
        let mut padded = Array2::zeros((padded_len, dim));
        padded.slice_mut(s![..len, ..]).assign(matrix);
        let mut mask = vec![false; padded_len];
        mask[..len].iter_mut().for_each(|m| *m = true);
        Ok(EmbeddingSequence {
            matrix: padded,
            mask,
        })
    }
}

/// `Z0[i] = x_i + o_i` for the first `len` order embeddings.
pub fn embed_sequence<T: Scalar>(
    features: &ArrayView2<T>,
    order_embeddings: &Array2<T>,
) -> Result<Array2<T>> {
    let (len, dim) = features.dim();
    let (max, order_dim) = order_embeddings.dim();
    if len > max {
        return Err(Error::SequenceTooLong { len, max });
    }
    if dim != order_dim {
        return Err(Error::shape(format!(
            "feature width {dim} differs from order embedding width {order_dim}"
        )));
    }
    Ok(features + &order_embeddings.slice(s![..len, ..]))
}

/// Per-position logits and softmax probabilities.
pub fn classify<T: Scalar>(
    z: &ArrayView2<T>,
    classifier: &ClassifierParams<T>,
) -> (Array2<T>, Array2<T>) {
    let logits = linear(z, &classifier.weight, &classifier.bias);
    let probs = softmax_rows(&logits.view());
    (logits, probs)
}

pub struct TransformerCache<T> {
    pub encoders: Vec<EncoderCache<T>>,
    final_ln: Option<LayerNormCache<T>>,
    /// Input of the classifier.
    pub output: Array2<T>,
}

/// Runs the encoder stack (and the optional final LN) on `z0`.
pub fn transformer_forward<T: Scalar>(
    z0: &ArrayView2<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    mask: Option<&[bool]>,
) -> Result<TransformerCache<T>> {
    let mut z = z0.to_owned();
    let mut encoders = Vec::with_capacity(params.encoders.len());
    for enc in &params.encoders {
        let (next, cache) = encoder_forward(&z.view(), enc, config, mask)?;
        encoders.push(cache);
        z = next;
    }
    let final_ln = match &params.final_ln {
        Some(ln) => {
            let (out, cache) = layer_norm_forward(&z.view(), ln, T::lit(config.layer_norm_eps));
            z = out;
            Some(cache)
        }
        None => None,
    };
    Ok(TransformerCache {
        encoders,
        final_ln,
        output: z,
    })
}

/// Class probabilities for a padded embedding batch row; masked rows are
/// computed but carry no meaning.
pub fn forward_embeddings<T: Scalar>(
    embeddings: &EmbeddingSequence<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Array2<T>> {
    let z0 = embed_sequence(&embeddings.matrix.view(), &params.order_embeddings)?;
    let cache = transformer_forward(&z0.view(), params, config, Some(&embeddings.mask))?;
    Ok(classify(&cache.output.view(), &params.classifier).1)
}

/// Stacks the CNN features of every cube into an `(len, D)` matrix.
fn sequence_features<T: Scalar>(
    seq: &VolumeSequence<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(Array2<T>, Vec<CnnCache<T>>)> {
    let dim = config.embed_dim();
    let mut features = Array2::zeros((seq.len(), dim));
    let mut caches = Vec::with_capacity(seq.len());
    for (i, cube) in seq.cubes.iter().enumerate() {
        let (out, cache) = cnn_forward(cube, params, config)?;
        features.row_mut(i).assign(&out.features);
        caches.push(cache);
    }
    Ok((features, caches))
}

fn check_sequence<T>(seq: &VolumeSequence<T>, config: &ModelConfig) -> Result<()> {
    if seq.cubes.is_empty() {
        return Err(Error::shape("sequence has no cubes"));
    }
    if seq.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            max: config.max_seq_len,
        });
    }
    if seq.labels.len() != seq.len() {
        return Err(Error::shape(format!(
            "{} labels for {} cubes",
            seq.labels.len(),
            seq.len()
        )));
    }
    Ok(())
}

/// CNN per cube, order embeddings, encoder stack, per-position softmax.
pub fn model_forward<T: Scalar>(
    seq: &VolumeSequence<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<PredictionSequence> {
    check_sequence(seq, config)?;
    let (features, _) = sequence_features(seq, params, config)?;
    let z0 = embed_sequence(&features.view(), &params.order_embeddings)?;
    let cache = transformer_forward(&z0.view(), params, config, None)?;
    let (_, probs) = classify(&cache.output.view(), &params.classifier);
    Ok(PredictionSequence {
        probabilities: probs
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect(),
        center_indices: seq.center_indices.clone(),
        source_id: seq.source_id.clone(),
    })
}

pub struct Gradients<T> {
    /// Mean weighted negative log-likelihood over all positions of the batch.
    pub loss: T,
    pub grads: ModelParams<T>,
    pub positions: usize,
}

/// Loss and exact gradients for a batch of sequences.
///
/// The loss is the mean over every position in the batch of
/// `class_weights[y] * -ln(max(p_y, 1e-12))`.
pub fn model_gradients<T: Scalar>(
    batch: &[VolumeSequence<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
    class_weights: [f64; 2],
) -> Result<Gradients<T>> {
    for seq in batch {
        check_sequence(seq, config)?;
    }
    let positions: usize = batch.iter().map(VolumeSequence::len).sum();
    let mut grads = params.zeros_like();
    if positions == 0 {
        return Ok(Gradients {
            loss: T::zero(),
            grads,
            positions,
        });
    }
    let norm = T::one() / T::lit(positions as f64);
    let floor = T::lit(LOG_FLOOR);
    let weights = [T::lit(class_weights[0]), T::lit(class_weights[1])];
    let mut loss = T::zero();

    for seq in batch {
        let len = seq.len();
        let (features, cnn_caches) = sequence_features(seq, params, config)?;
        let z0 = embed_sequence(&features.view(), &params.order_embeddings)?;
        let cache = transformer_forward(&z0.view(), params, config, None)?;
        let (_, probs) = classify(&cache.output.view(), &params.classifier);
        // The log floor would otherwise hide NaN probabilities.
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!(
                "non-finite class probabilities for sequence {}",
                seq.source_id
            )));
        }

        let mut d_logits = probs.clone();
        for (i, &label) in seq.labels.iter().enumerate() {
            let class = label as usize;
            let w = weights[class];
            loss += w * -probs[[i, class]].max(floor).ln();
            d_logits[[i, class]] -= T::one();
            d_logits.row_mut(i).mapv_inplace(|g| g * w * norm);
        }

        let mut d_z = linear_backward(
            &d_logits.view(),
            &cache.output.view(),
            &params.classifier.weight,
            &mut grads.classifier.weight,
            &mut grads.classifier.bias,
        );
        if let (Some(ln), Some(ln_cache), Some(ln_grad)) =
            (&params.final_ln, &cache.final_ln, grads.final_ln.as_mut())
        {
            d_z = layer_norm_backward(&d_z.view(), ln_cache, ln, ln_grad);
        }
        for ((enc, enc_cache), enc_grad) in params
            .encoders
            .iter()
            .zip(&cache.encoders)
            .zip(grads.encoders.iter_mut())
            .rev()
        {
            d_z = encoder_backward(&d_z.view(), enc_cache, enc, enc_grad, config);
        }
        let mut order_grad = grads.order_embeddings.slice_mut(s![..len, ..]);
        order_grad += &d_z;
        for (row, cnn_cache) in d_z.axis_iter(Axis(0)).zip(&cnn_caches) {
            cnn_backward(&row, cnn_cache, params, &mut grads);
        }
    }

    let loss = loss * norm;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "training loss is {loss} over {positions} positions, gradients finite: {}",
            grads.all_finite()
        )));
    }
    Ok(Gradients {
        loss,
        grads,
        positions,
    })
}

/// Mean loss of a batch without gradients (used by finite-difference checks).
pub fn batch_loss<T: Scalar>(
    batch: &[VolumeSequence<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
    class_weights: [f64; 2],
) -> Result<T> {
    let mut total = T::zero();
    let mut positions = 0usize;
    let floor = T::lit(LOG_FLOOR);
    for seq in batch {
        check_sequence(seq, config)?;
        let (features, _) = sequence_features(seq, params, config)?;
        let z0 = embed_sequence(&features.view(), &params.order_embeddings)?;
        let cache = transformer_forward(&z0.view(), params, config, None)?;
        let (_, probs) = classify(&cache.output.view(), &params.classifier);
        for (i, &label) in seq.labels.iter().enumerate() {
            let class = label as usize;
            total += T::lit(class_weights[class]) * -probs[[i, class]].max(floor).ln();
        }
        positions += seq.len();
    }
    Ok(if positions == 0 {
        T::zero()
    } else {
        total / T::lit(positions as f64)
    })
}

/// Flattened feature vector of one cube (convenience wrapper).
pub fn cube_features<T: Scalar>(
    cube: &ndarray::Array3<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Array1<T>> {
    Ok(cnn_forward(cube, params, config)?.0.features)
}
