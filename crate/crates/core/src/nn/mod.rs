//! Transformer encoder building blocks and parameter storage.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod params;

pub use config::EncoderConfig;
pub use encoder::{classify, encoder_forward, ffn, mhsa, sinusoidal_positions};
pub use params::{Bound, Init, ParamLayout, ParamSpec, ParamStore};
