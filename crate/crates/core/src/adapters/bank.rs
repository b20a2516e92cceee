use crate::adapters::baselines::{self, HoulsbyParams};
use crate::adapters::config::{AdapterConfig, Site, Variant};
use crate::adapters::multiconv::{self, MultiConvParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, EncoderConfig, ParamLayout};
use crate::scalar::Scalar;

/// Per-layer adapter wiring for one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    config: AdapterConfig,
    num_layers: usize,
    model_dim: usize,
}

pub fn site_prefix(layer: usize, site: Site) -> String {
    format!("layers.{layer}.adapter.{}", site.name())
}

impl AdapterBank {
    pub fn new(config: &AdapterConfig, enc: &EncoderConfig) -> Result<Self> {
        Self::with_layers(config, enc, enc.num_layers)
    }

    /// A bank with an explicit layer count; the encoder rejects banks whose
    /// count differs from its own.
    pub fn with_layers(config: &AdapterConfig, enc: &EncoderConfig, num_layers: usize) -> Result<Self> {
        config.validate(enc)?;
        Ok(Self {
            config: config.resolved(),
            num_layers,
            model_dim: enc.model_dim,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Sites with a residual adapter branch in every layer.
    pub fn sites(&self) -> Vec<Site> {
        match self.config.variant {
            Variant::MultiConv | Variant::Houlsby => {
                let placement = self.config.effective_placement();
                [Site::Mhsa, Site::Ffn].into_iter().filter(|&s| placement.includes(s)).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn prompt_len(&self) -> usize {
        match self.config.variant {
            Variant::Prompt => self.config.prompt_tokens,
            _ => 0,
        }
    }

    pub fn uses_lora(&self) -> bool {
        self.config.variant == Variant::Lora
    }

    /// Declares every adapter parameter (all trainable).
    pub fn register(&self, layout: &mut ParamLayout) -> Result<()> {
        let d = self.model_dim;
        for layer in 0..self.num_layers {
            for site in self.sites() {
                let prefix = site_prefix(layer, site);
                match self.config.variant {
                    Variant::MultiConv => multiconv::register(layout, &prefix, &self.config, d)?,
                    Variant::Houlsby => baselines::register_houlsby(layout, &prefix, d, self.config.bottleneck)?,
                    _ => unreachable!("sites() is empty for other variants"),
                }
            }
            if self.uses_lora() {
                baselines::register_lora(layout, &format!("layers.{layer}"), d, self.config.rank)?;
            }
        }
        if self.prompt_len() > 0 {
            baselines::register_prompt(layout, d, self.prompt_len())?;
        }
        Ok(())
    }

    /// Adapter output at `site` of `layer`, or `None` when no adapter sits there.
    pub fn site_forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        layer: usize,
        site: Site,
        a: Var,
    ) -> Result<Option<Var>> {
        if !self.sites().contains(&site) {
            return Ok(None);
        }
        let prefix = site_prefix(layer, site);
        let out = match self.config.variant {
            Variant::MultiConv => {
                let p = MultiConvParams::bind(bound, &prefix, &self.config)?;
                multiconv::multiconv_forward(g, a, &p, self.config.fusion)?
            }
            Variant::Houlsby => {
                let p = HoulsbyParams::bind(bound, &prefix)?;
                baselines::houlsby_forward(g, a, &p)?
            }
            v => return Err(Error::Config(format!("variant {} has no residual sites", v.name()))),
        };
        Ok(Some(out))
    }

    /// LoRA factor handles for projection `proj` of `layer`, when LoRA is active.
    pub fn lora_factors(&self, bound: &Bound, layer: usize, proj: &str) -> Result<Option<(Var, Var)>> {
        if !self.uses_lora() {
            return Ok(None);
        }
        let p = format!("layers.{layer}.attn.{proj}");
        Ok(Some((bound.get(&format!("{p}.lora_a"))?, bound.get(&format!("{p}.lora_b"))?)))
    }
}
