use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the transformer backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub inner_dim: usize,
    pub num_heads: usize,
    /// Width of the precomputed input frames.
    pub input_dim: usize,
    pub max_seq_len: usize,
    /// Pre-norm blocks with a final LayerNorm; `false` selects post-norm.
    #[serde(default = "yes")]
    pub pre_norm: bool,
    /// Add sinusoidal positional encodings after the input projection.
    #[serde(default = "yes")]
    pub positional: bool,
}

fn yes() -> bool {
    true
}

impl EncoderConfig {
    /// XLSR-53 context network: 24 blocks, width 1024, inner 4096, 16 heads.
    /// Used for parameter audits only.
    pub fn xlsr() -> Self {
        Self {
            num_layers: 24,
            model_dim: 1024,
            inner_dim: 4096,
            num_heads: 16,
            input_dim: 512,
            max_seq_len: 201,
            pre_norm: true,
            positional: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            inner_dim: 128,
            num_heads: 4,
            input_dim: 16,
            max_seq_len: 256,
            pre_norm: true,
            positional: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "xlsr" => Ok(Self::xlsr()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected xlsr or toy)"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("inner_dim", self.inner_dim),
            ("num_heads", self.num_heads),
            ("input_dim", self.input_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be >= 1")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}
