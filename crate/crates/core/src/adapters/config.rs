use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::EncoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "multiconv")]
    MultiConv,
    #[serde(rename = "houlsby")]
    Houlsby,
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "bitfit")]
    BitFit,
    #[serde(rename = "prompt")]
    Prompt,
    #[serde(rename = "none")]
    None,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::MultiConv,
        Variant::Lora,
        Variant::Houlsby,
        Variant::BitFit,
        Variant::Prompt,
        Variant::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MultiConv => "multiconv",
            Variant::Houlsby => "houlsby",
            Variant::Lora => "lora",
            Variant::BitFit => "bitfit",
            Variant::Prompt => "prompt",
            Variant::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter variant `{s}`")))
    }
}

/// How the parallel convolution branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Channel concatenation followed by a residual depthwise kernel-3 conv.
    MixupConv,
    Sum,
    WeightedSum,
    Concat,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Sum, Fusion::Concat, Fusion::WeightedSum, Fusion::MixupConv];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::MixupConv => "mixup_conv",
            Fusion::Sum => "sum",
            Fusion::WeightedSum => "weighted_sum",
            Fusion::Concat => "concat",
        }
    }

    /// Whether branches see disjoint channel groups of the bottleneck.
    pub fn splits_channels(self) -> bool {
        matches!(self, Fusion::MixupConv | Fusion::Concat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Mhsa,
    Ffn,
    Both,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::Mhsa => "mhsa",
            Placement::Ffn => "ffn",
            Placement::Both => "both",
        }
    }

    pub fn includes(self, site: Site) -> bool {
        matches!(
            (self, site),
            (Placement::Both, _) | (Placement::Mhsa, Site::Mhsa) | (Placement::Ffn, Site::Ffn)
        )
    }
}

/// Sublayer whose output an adapter reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    Mhsa,
    Ffn,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Mhsa => "mhsa",
            Site::Ffn => "ffn",
        }
    }
}

/// The parameter-efficient method attached to the encoder.
///
/// Fields that do not apply to the selected variant are ignored. `placement`
/// defaults per variant: after MHSA for MultiConv, both sites for Houlsby.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub variant: Variant,
    pub kernels: Vec<usize>,
    pub bottleneck: usize,
    pub fusion: Fusion,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    pub rank: usize,
    pub prompt_tokens: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MultiConv,
            kernels: vec![3, 7, 15, 23],
            bottleneck: 64,
            fusion: Fusion::MixupConv,
            placement: None,
            rank: 16,
            prompt_tokens: 30,
        }
    }
}

impl AdapterConfig {
    pub fn multiconv(kernels: &[usize], bottleneck: usize) -> Self {
        Self {
            kernels: kernels.to_vec(),
            bottleneck,
            ..Self::default()
        }
    }

    pub fn of_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn none() -> Self {
        Self::of_variant(Variant::None)
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = Some(placement);
        self
    }

    pub fn effective_placement(&self) -> Placement {
        self.placement.unwrap_or(match self.variant {
            Variant::Houlsby => Placement::Both,
            _ => Placement::Mhsa,
        })
    }

    /// Same config with every per-variant default written out.
    pub fn resolved(&self) -> Self {
        Self {
            placement: Some(self.effective_placement()),
            ..self.clone()
        }
    }

    /// Width of each branch's channel group, or of the full bottleneck when
    /// branches are summed.
    pub fn branch_channels(&self) -> usize {
        if self.fusion.splits_channels() && !self.kernels.is_empty() {
            self.bottleneck / self.kernels.len()
        } else {
            self.bottleneck
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match self.variant {
            Variant::MultiConv => {
                if self.bottleneck == 0 {
                    return fail("adapter.bottleneck must be >= 1".into());
                }
                if let Some(&k) = self.kernels.iter().find(|&&k| k == 0 || k % 2 == 0) {
                    return fail(format!("kernel size {k} must be odd and >= 1"));
                }
                let n = self.kernels.len();
                if n > 0 && self.fusion.splits_channels() && self.bottleneck % n != 0 {
                    return fail(format!(
                        "bottleneck {} is not divisible by {n} kernel branches under {} fusion",
                        self.bottleneck,
                        self.fusion.name()
                    ));
                }
            }
            Variant::Houlsby => {
                if self.bottleneck == 0 {
                    return fail("adapter.bottleneck must be >= 1".into());
                }
            }
            Variant::Lora => {
                let limit = enc.model_dim;
                if self.rank == 0 || self.rank >= limit {
                    return fail(format!(
                        "LoRA rank {} must satisfy 1 <= r < min(d_in, d_out) = {limit}",
                        self.rank
                    ));
                }
            }
            Variant::BitFit | Variant::Prompt | Variant::None => {}
        }
        Ok(())
    }
}
