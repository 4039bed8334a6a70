//! Part-aware emotion recognition: landmark-driven part-aware spatial (PAS)
//! images, a two-stream ResNet with context infusion (Cont-In) blocks, the
//! training losses, evaluation metrics, dataset handling, and the experiment
//! harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common concrete instantiations.

pub mod data;
pub mod error;
pub mod harness;
pub mod imageops;
pub mod landmarks;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pasgen;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PeriModelF32 = model::PeriModel<f32>;
pub type PeriModelF64 = model::PeriModel<f64>;
pub type ContInBlockF32 = model::ContInBlock<f32>;
pub type ContInBlockF64 = model::ContInBlock<f64>;
pub type PasImageF32 = pasgen::PasImage<f32>;
pub type PasImageF64 = pasgen::PasImage<f64>;
pub type GaussianFieldF32 = pasgen::GaussianField<f32>;
pub type GaussianFieldF64 = pasgen::GaussianField<f64>;
pub type PartAwareMaskF32 = pasgen::PartAwareMask<f32>;
pub type PartAwareMaskF64 = pasgen::PartAwareMask<f64>;
pub type BatchWeightsF32 = losses::BatchWeights<f32>;
pub type BatchWeightsF64 = losses::BatchWeights<f64>;
pub type EvalRecordF32 = metrics::EvalRecord<f32>;
pub type EvalRecordF64 = metrics::EvalRecord<f64>;
