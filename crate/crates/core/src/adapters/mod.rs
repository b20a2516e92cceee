//! Parameter-efficient adaptation methods attached to the encoder.

pub mod bank;
pub mod baselines;
pub mod config;
pub mod multiconv;

pub use bank::{site_prefix, AdapterBank};
pub use baselines::{bitfit_mark, houlsby_forward, is_bitfit_bias, lora_forward, prompt_prepend, HoulsbyParams, LORA_TARGETS};
pub use config::{AdapterConfig, Fusion, Placement, Site, Variant};
pub use multiconv::{aggregate, mixup_fuse, multiconv_forward, MultiConvParams};
