//! Sequence labeler: a shallow 3D-CNN encodes every cube, learnable order
//! embeddings are added, a stack of pre-norm Transformer encoders mixes the
//! sequence bidirectionally, and a per-position softmax classifies each cube.

pub mod attention;
pub mod cnn;
pub mod config;
pub mod encoder;
pub mod layers;
pub mod network;
pub mod params;

pub use attention::{msa_backward, msa_forward, AttentionCache, AttentionWeights};
pub use cnn::{cnn_forward, CnnOutput};
pub use config::{FfnInput, ModelConfig};
pub use encoder::{encoder_backward, encoder_forward};
pub use network::{
    batch_loss, classify, cube_features, embed_sequence, forward_embeddings, model_forward, model_gradients,
    transformer_forward, EmbeddingSequence, Gradients, PredictionSequence, LOG_FLOOR,
};
pub use params::{Checkpoint, ClassifierParams, ConvParams, EncoderParams, LayerNormParams, ModelParams};
