//! Learnable parameters, canonical naming and checkpoint persistence.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Taps of a 3x3x3 kernel.
pub const TAPS: usize = 27;

/// 3x3x3 convolution. `weight` is stored as `(out, 27 * in)` with column
/// index `tap * in + in_channel`, `tap = (kz * 3 + ky) * 3 + kx`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub scale: Array1<T>,
    pub shift: Array1<T>,
}

/// One encoder. Projections act on row vectors: `y = x W (+ b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub ln1: LayerNormParams<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ln2: LayerNormParams<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub conv: Vec<ConvParams<T>>,
    pub order_embeddings: Array2<T>,
    pub encoders: Vec<EncoderParams<T>>,
    pub final_ln: Option<LayerNormParams<T>>,
    pub classifier: ClassifierParams<T>,
}

struct Init<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Init<'_> {
    fn normal<T: Scalar>(&mut self, shape: (usize, usize), std: f64) -> Array2<T> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let dist = Normal::new(0.0, std).expect("std is finite and positive");
                Array2::from_shape_simple_fn(shape, || T::lit(dist.sample(rng)))
            }
            None => Array2::zeros(shape),
        }
    }

    fn layer_norm<T: Scalar>(&self, d: usize) -> LayerNormParams<T> {
        LayerNormParams {
            scale: if self.rng.is_some() {
                Array1::ones(d)
            } else {
                Array1::zeros(d)
            },
            shift: Array1::zeros(d),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialization: fan-in scaled zero-mean normals for weights
    /// (He for convolutions), N(0, 0.02) order embeddings, unit LN scales,
    /// zero biases and shifts.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Init { rng: Some(&mut rng) })
    }

    /// All-zero tensors with the shapes `config` implies (gradient accumulators).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, Init { rng: None })
    }

    fn build(config: &ModelConfig, mut init: Init<'_>) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim();
        let f = config.ffn_width();
        let linear_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let mut conv = Vec::with_capacity(4);
        let mut in_ch = 1;
        for &out_ch in &config.conv_filters {
            let fan_in = TAPS * in_ch;
            conv.push(ConvParams {
                weight: init.normal((out_ch, fan_in), (2.0 / fan_in as f64).sqrt()),
                bias: Array1::zeros(out_ch),
            });
            in_ch = out_ch;
        }
        let order_embeddings = init.normal((config.max_seq_len, d), 0.02);
        let encoders = (0..config.num_encoders)
            .map(|_| EncoderParams {
                ln1: init.layer_norm(d),
                wq: init.normal((d, d), linear_std(d)),
                wk: init.normal((d, d), linear_std(d)),
                wv: init.normal((d, d), linear_std(d)),
                wo: init.normal((d, d), linear_std(d)),
                ln2: init.layer_norm(d),
                w1: init.normal((d, f), linear_std(d)),
                b1: Array1::zeros(f),
                w2: init.normal((f, d), linear_std(f)),
                b2: Array1::zeros(d),
            })
            .collect();
        let final_ln = config.final_layer_norm.then(|| init.layer_norm(d));
        let classifier = ClassifierParams {
            weight: init.normal((d, config.num_classes), linear_std(d)),
            bias: Array1::zeros(config.num_classes),
        };
        Ok(ModelParams {
            conv,
            order_embeddings,
            encoders,
            final_ln,
            classifier,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.named_tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), c.weight.view().into_dyn()));
            out.push((format!("conv{}.bias", i + 1), c.bias.view().into_dyn()));
        }
        out.push(("order_embeddings".to_string(), self.order_embeddings.view().into_dyn()));
        for (i, e) in self.encoders.iter().enumerate() {
            let p = format!("encoder{}", i + 1);
            out.push((format!("{p}.ln1.scale"), e.ln1.scale.view().into_dyn()));
            out.push((format!("{p}.ln1.shift"), e.ln1.shift.view().into_dyn()));
            out.push((format!("{p}.msa.wq"), e.wq.view().into_dyn()));
            out.push((format!("{p}.msa.wk"), e.wk.view().into_dyn()));
            out.push((format!("{p}.msa.wv"), e.wv.view().into_dyn()));
            out.push((format!("{p}.msa.wo"), e.wo.view().into_dyn()));
            out.push((format!("{p}.ln2.scale"), e.ln2.scale.view().into_dyn()));
            out.push((format!("{p}.ln2.shift"), e.ln2.shift.view().into_dyn()));
            out.push((format!("{p}.ffn.w1"), e.w1.view().into_dyn()));
            out.push((format!("{p}.ffn.b1"), e.b1.view().into_dyn()));
            out.push((format!("{p}.ffn.w2"), e.w2.view().into_dyn()));
            out.push((format!("{p}.ffn.b2"), e.b2.view().into_dyn()));
        }
        if let Some(ln) = &self.final_ln {
            out.push(("final_ln.scale".to_string(), ln.scale.view().into_dyn()));
            out.push(("final_ln.shift".to_string(), ln.shift.view().into_dyn()));
        }
        out.push(("classifier.weight".to_string(), self.classifier.weight.view().into_dyn()));
        out.push(("classifier.bias".to_string(), self.classifier.bias.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{}.weight", i + 1), c.weight.view_mut().into_dyn()));
            out.push((format!("conv{}.bias", i + 1), c.bias.view_mut().into_dyn()));
        }
        out.push((
            "order_embeddings".to_string(),
            self.order_embeddings.view_mut().into_dyn(),
        ));
        for (i, e) in self.encoders.iter_mut().enumerate() {
            let p = format!("encoder{}", i + 1);
            out.push((format!("{p}.ln1.scale"), e.ln1.scale.view_mut().into_dyn()));
            out.push((format!("{p}.ln1.shift"), e.ln1.shift.view_mut().into_dyn()));
            out.push((format!("{p}.msa.wq"), e.wq.view_mut().into_dyn()));
            out.push((format!("{p}.msa.wk"), e.wk.view_mut().into_dyn()));
            out.push((format!("{p}.msa.wv"), e.wv.view_mut().into_dyn()));
            out.push((format!("{p}.msa.wo"), e.wo.view_mut().into_dyn()));
            out.push((format!("{p}.ln2.scale"), e.ln2.scale.view_mut().into_dyn()));
            out.push((format!("{p}.ln2.shift"), e.ln2.shift.view_mut().into_dyn()));
            out.push((format!("{p}.ffn.w1"), e.w1.view_mut().into_dyn()));
            out.push((format!("{p}.ffn.b1"), e.b1.view_mut().into_dyn()));
            out.push((format!("{p}.ffn.w2"), e.w2.view_mut().into_dyn()));
            out.push((format!("{p}.ffn.b2"), e.b2.view_mut().into_dyn()));
        }
        if let Some(ln) = &mut self.final_ln {
            out.push(("final_ln.scale".to_string(), ln.scale.view_mut().into_dyn()));
            out.push(("final_ln.shift".to_string(), ln.shift.view_mut().into_dyn()));
        }
        out.push((
            "classifier.weight".to_string(),
            self.classifier.weight.view_mut().into_dyn(),
        ));
        out.push((
            "classifier.bias".to_string(),
            self.classifier.bias.view_mut().into_dyn(),
        ));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += factor * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, factor: T) {
        for ((_, mut a), (_, b)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            a.zip_mut_with(&b, |x, &y| *x += factor * y);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, mut t) in self.named_tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over all tensors.
    pub fn global_norm(&self) -> T {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|&v| v * v).collect::<Vec<_>>())
            .sum::<T>()
            .sqrt()
    }

    /// Fails unless every tensor has the shape `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::zeros(config)?;
        let expected = reference.named_tensors();
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, e), (_, a)) in expected.iter().zip(&actual) {
            if e.shape() != a.shape() {
                return Err(Error::shape(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    e.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Canonical `(out, in, 3, 3, 3)` layout of an internal conv weight.
fn conv_weight_to_canonical<T: Scalar>(weight: &Array2<T>) -> ArrayD<T> {
    let (out_ch, cols) = weight.dim();
    let in_ch = cols / TAPS;
    ArrayD::from_shape_fn(IxDyn(&[out_ch, in_ch, 3, 3, 3]), |idx| {
        let tap = (idx[2] * 3 + idx[3]) * 3 + idx[4];
        weight[[idx[0], tap * in_ch + idx[1]]]
    })
}

fn conv_weight_from_canonical<T: Scalar>(canonical: &ArrayD<T>) -> Result<Array2<T>> {
    let shape = canonical.shape();
    if shape.len() != 5 || shape[2..] != [3, 3, 3] {
        return Err(Error::shape(format!(
            "conv weight must be (out, in, 3, 3, 3), got {shape:?}"
        )));
    }
    let (out_ch, in_ch) = (shape[0], shape[1]);
    Ok(Array2::from_shape_fn((out_ch, TAPS * in_ch), |(o, col)| {
        let (tap, i) = (col / in_ch, col % in_ch);
        canonical[[o, i, tap / 9, (tap / 3) % 3, tap % 3]]
    }))
}

/// A model snapshot: configuration, parameters and the seed of the run
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub seed: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_field("model_config", &self.config)?;
        c.set_field("training_seed", &self.seed)?;
        for (name, tensor) in self.params.named_tensors() {
            let tensor = if name.starts_with("conv") && name.ends_with(".weight") {
                let two_d = tensor
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("conv weights are 2-D")
                    .to_owned();
                Tensor::from_array(&conv_weight_to_canonical(&two_d))
            } else {
                Tensor::from_array(&tensor)
            };
            c.insert(name, tensor);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let config: ModelConfig = c.field("model_config")?;
        let seed: u64 = c.field("training_seed")?;
        let mut params = ModelParams::<T>::zeros(&config)?;
        for (name, mut slot) in params.named_tensors_mut() {
            let stored = c.tensor(&name)?.to_array::<T>()?;
            let stored = if name.starts_with("conv") && name.ends_with(".weight") {
                conv_weight_from_canonical(&stored)?.into_dyn()
            } else {
                stored
            };
            if stored.shape() != slot.shape() {
                return Err(Error::shape(format!(
                    "{name}: checkpoint shape {:?} does not match configured shape {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            slot.assign(&stored);
        }
        Ok(Checkpoint {
            config,
            params,
            seed,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
