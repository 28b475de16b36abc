//! One encoder block:
//!
//! ```text
//! m   = MSA(LN1(z))
//! out = FFN(LN2(m + z)) + m + z        (FfnInput::NormalizedSum)
//! out = FFN(LN2(m) + z) + m + z        (FfnInput::SumOfNormalized)
//! ```
//!
//! with `FFN(u) = ReLU(u W1 + b1) W2 + b2`.

use ndarray::{Array2, ArrayView2};

use super::attention::{msa_backward, msa_forward, AttentionCache, AttentionGrads, AttentionWeights};
use super::config::{FfnInput, ModelConfig};
use super::layers::{
    layer_norm_backward, layer_norm_forward, linear, linear_backward, relu, relu_backward,
    LayerNormCache,
};
use super::params::EncoderParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub struct EncoderCache<T> {
    ln1: LayerNormCache<T>,
    pub attention: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    ffn_input: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

fn weights<T>(enc: &EncoderParams<T>) -> AttentionWeights<'_, T> {
    AttentionWeights {
        wq: &enc.wq,
        wk: &enc.wk,
        wv: &enc.wv,
        wo: &enc.wo,
    }
}

pub fn encoder_forward<T: Scalar>(
    z: &ArrayView2<T>,
    enc: &EncoderParams<T>,
    config: &ModelConfig,
    mask: Option<&[bool]>,
) -> Result<(Array2<T>, EncoderCache<T>)> {
    let dim = enc.wq.nrows();
    if z.ncols() != dim {
        return Err(Error::shape(format!(
            "encoder input width {} differs from the embedding width {dim}",
            z.ncols()
        )));
    }
    let eps = T::lit(config.layer_norm_eps);
    let (a, ln1) = layer_norm_forward(z, &enc.ln1, eps);
    let (m, attention) = msa_forward(&a.view(), weights(enc), config.num_heads, mask)?;
    let (ffn_input, ln2) = match config.ffn_input {
        FfnInput::NormalizedSum => layer_norm_forward(&(&m + z).view(), &enc.ln2, eps),
        FfnInput::SumOfNormalized => {
            let (b, cache) = layer_norm_forward(&m.view(), &enc.ln2, eps);
            (b + z, cache)
        }
    };
    let hidden_pre = linear(&ffn_input.view(), &enc.w1, &enc.b1);
    let hidden = relu(&hidden_pre);
    let f = linear(&hidden.view(), &enc.w2, &enc.b2);
    let out = f + &m + z;
    Ok((
        out,
        EncoderCache {
            ln1,
            attention,
            ln2,
            ffn_input,
            hidden_pre,
            hidden,
        },
    ))
}

/// Accumulates parameter gradients into `grad` and returns `d z`.
pub fn encoder_backward<T: Scalar>(
    d_out: &ArrayView2<T>,
    cache: &EncoderCache<T>,
    enc: &EncoderParams<T>,
    grad: &mut EncoderParams<T>,
    config: &ModelConfig,
) -> Array2<T> {
    let mut d_hidden = linear_backward(
        d_out,
        &cache.hidden.view(),
        &enc.w2,
        &mut grad.w2,
        &mut grad.b2,
    );
    relu_backward(&mut d_hidden, &cache.hidden_pre);
    let d_ffn_input = linear_backward(
        &d_hidden.view(),
        &cache.ffn_input.view(),
        &enc.w1,
        &mut grad.w1,
        &mut grad.b1,
    );

    let (d_m, mut d_z) = match config.ffn_input {
        FfnInput::NormalizedSum => {
            let d_sum =
                layer_norm_backward(&d_ffn_input.view(), &cache.ln2, &enc.ln2, &mut grad.ln2)
                    + d_out;
            (d_sum.clone(), d_sum)
        }
        FfnInput::SumOfNormalized => {
            let d_m =
                layer_norm_backward(&d_ffn_input.view(), &cache.ln2, &enc.ln2, &mut grad.ln2)
                    + d_out;
            (d_m, d_ffn_input + d_out)
        }
    };

    let d_a = msa_backward(
        &d_m.view(),
        &cache.attention,
        weights(enc),
        AttentionGrads {
            wq: &mut grad.wq,
            wk: &mut grad.wk,
            wv: &mut grad.wv,
            wo: &mut grad.wo,
        },
    );
    d_z += &layer_norm_backward(&d_a.view(), &cache.ln1, &enc.ln1, &mut grad.ln1);
    d_z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(ffn_input: FfnInput) -> ModelConfig {
        ModelConfig {
            cube_side: 16,
            max_seq_len: 4,
            conv_filters: vec![1, 2, 4, 8],
            num_encoders: 1,
            num_heads: 2,
            ffn_hidden: Some(6),
            ffn_input,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_weight_encoder_is_identity() {
        let config = ModelConfig::default();
        let mut params = ModelParams::<f32>::init(&config, 0).unwrap();
        let enc = &mut params.encoders[0];
        for w in [&mut enc.wq, &mut enc.wk, &mut enc.wv, &mut enc.wo, &mut enc.w1, &mut enc.w2] {
            w.fill(0.0);
        }
        enc.b1.fill(0.0);
        enc.b2.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array2::from_shape_simple_fn((30, 128), || rng.random_range(-3.0..3.0f32));
        let (out, _) = encoder_forward(&z.view(), &params.encoders[0], &config, None).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn backward_matches_finite_differences_for_both_variants() {
        for variant in [FfnInput::NormalizedSum, FfnInput::SumOfNormalized] {
            let config = small_config(variant);
            let params = ModelParams::<f64>::init(&config, 1).unwrap();
            let mut enc = params.encoders[0].clone();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            enc.b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            enc.ln2.shift.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            let z = Array2::from_shape_simple_fn((3, 8), || rng.random_range(-1.0..1.0));
            let g = Array2::from_shape_simple_fn((3, 8), || rng.random_range(-1.0..1.0));
            let loss = |z: &Array2<f64>, enc: &EncoderParams<f64>| {
                (&encoder_forward(&z.view(), enc, &config, None).unwrap().0 * &g).sum()
            };
            let (_, cache) = encoder_forward(&z.view(), &enc, &config, None).unwrap();
            let mut grad = params.zeros_like().encoders.remove(0);
            let dz = encoder_backward(&g.view(), &cache, &enc, &mut grad, &config);
            let h = 1e-6;
            for i in 0..3 {
                for j in 0..8 {
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[[i, j]] += h;
                    zm[[i, j]] -= h;
                    let numeric = (loss(&zp, &enc) - loss(&zm, &enc)) / (2.0 * h);
                    assert!((numeric - dz[[i, j]]).abs() < 1e-6, "{variant:?} dz ({i},{j})");
                }
            }
            for j in 0..8 {
                let (mut ep, mut em) = (enc.clone(), enc.clone());
                ep.ln1.scale[j] += h;
                em.ln1.scale[j] -= h;
                let numeric = (loss(&z, &ep) - loss(&z, &em)) / (2.0 * h);
                assert!((numeric - grad.ln1.scale[j]).abs() < 1e-6, "{variant:?} ln1.scale {j}");
                let (mut ep, mut em) = (enc.clone(), enc.clone());
                ep.w1[[j, 2]] += h;
                em.w1[[j, 2]] -= h;
                let numeric = (loss(&z, &ep) - loss(&z, &em)) / (2.0 * h);
                assert!((numeric - grad.w1[[j, 2]]).abs() < 1e-6, "{variant:?} w1 {j}");
            }
        }
    }
}
