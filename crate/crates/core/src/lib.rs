//! Significant-stenosis detection along straightened coronary vessels.
//!
//! The pipeline generates synthetic straightened-vessel volumes
//! ([`phantom`]), samples ordered sequences of cubic volumes along the
//! centerline ([`sampling`]), labels every cube with a 3D-CNN + Transformer
//! sequence model ([`model`]), trains it with centerline-level
//! cross-validation ([`training`]) and scores it with boundary-tolerant
//! point metrics ([`evaluation`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below name the usual instantiations.

pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod phantom;
pub mod sampling;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type MprImageF32 = phantom::MprImage<f32>;
pub type MprImageF64 = phantom::MprImage<f64>;
pub type VolumeSequenceF32 = sampling::VolumeSequence<f32>;
pub type VolumeSequenceF64 = sampling::VolumeSequence<f64>;
pub type ModelParamsF32 = model::ModelParams<f32>;
pub type ModelParamsF64 = model::ModelParams<f64>;
pub type CheckpointF32 = model::Checkpoint<f32>;
pub type CheckpointF64 = model::Checkpoint<f64>;
