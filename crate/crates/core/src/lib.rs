//! Parameter-efficient fine-tuning laboratory: a small reverse-mode autodiff
//! engine, a transformer encoder, multi-scale convolutional adapters with
//! LoRA / Houlsby / BitFit / prompt baselines, parameter audits, a synthetic
//! multi-scale spoofing benchmark, and Adam training with EER evaluation.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod ablation;
pub mod adapters;
pub mod audit;
pub mod autodiff;
pub mod config;
mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use adapters::{AdapterBank, AdapterConfig, Fusion, Placement, Variant};
pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use model::{Model, TrainMode};
pub use nn::{EncoderConfig, ParamStore};
pub use rng::SplitRng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
