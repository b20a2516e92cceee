//! Full detector: backbone parameters, attached adapter method and head.

use crate::adapters::{is_bitfit_bias, AdapterBank, AdapterConfig, Variant};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::encoder::scores_from_logits;
use crate::nn::{classify, encoder_forward, Bound, EncoderConfig, Init, ParamLayout, ParamStore};
use crate::rng::SplitRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Prefix of the classification head parameters. The head stands in for an
/// external back-end and is not part of the audited adaptation budget.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Backbone frozen; adapter parameters and head train.
    Peft,
    /// Everything trains.
    FullTune,
    /// Nothing trains.
    FrozenOnly,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Peft => "peft",
            TrainMode::FullTune => "full_tune",
            TrainMode::FrozenOnly => "frozen_only",
        }
    }
}

fn normal(fan_in: usize) -> Init {
    Init::Normal {
        std: 1.0 / (fan_in as f64).sqrt(),
    }
}

/// Backbone and head declarations, all frozen.
pub fn backbone_layout(enc: &EncoderConfig) -> Result<ParamLayout> {
    enc.validate()?;
    let (d, dff, f) = (enc.model_dim, enc.inner_dim, enc.input_dim);
    let mut l = ParamLayout::new();
    l.push("input.weight", &[f, d], false, normal(f))?;
    l.push("input.bias", &[d], false, Init::Zeros)?;
    for i in 0..enc.num_layers {
        let p = format!("layers.{i}");
        l.push(format!("{p}.ln1.weight"), &[d], false, Init::Ones)?;
        l.push(format!("{p}.ln1.bias"), &[d], false, Init::Zeros)?;
        for proj in ["q", "k", "v", "out"] {
            l.push(format!("{p}.attn.{proj}.weight"), &[d, d], false, normal(d))?;
            l.push(format!("{p}.attn.{proj}.bias"), &[d], false, Init::Zeros)?;
        }
        l.push(format!("{p}.ln2.weight"), &[d], false, Init::Ones)?;
        l.push(format!("{p}.ln2.bias"), &[d], false, Init::Zeros)?;
        l.push(format!("{p}.ffn.fc1.weight"), &[d, dff], false, normal(d))?;
        l.push(format!("{p}.ffn.fc1.bias"), &[dff], false, Init::Zeros)?;
        l.push(format!("{p}.ffn.fc2.weight"), &[dff, d], false, normal(dff))?;
        l.push(format!("{p}.ffn.fc2.bias"), &[d], false, Init::Zeros)?;
    }
    l.push("final_ln.weight", &[d], false, Init::Ones)?;
    l.push("final_ln.bias", &[d], false, Init::Zeros)?;
    // zero head: an untrained detector scores every input identically
    l.push("head.weight", &[d, 2], false, Init::Zeros)?;
    l.push("head.bias", &[2], false, Init::Zeros)?;
    Ok(l)
}

/// Complete parameter declaration with trainable flags set for `mode`.
pub fn model_layout(enc: &EncoderConfig, adapter: &AdapterConfig, mode: TrainMode) -> Result<(ParamLayout, AdapterBank)> {
    let bank = AdapterBank::new(adapter, enc)?;
    let mut layout = backbone_layout(enc)?;
    bank.register(&mut layout)?;
    match mode {
        TrainMode::FullTune => layout.set_trainable(|_| true, true),
        TrainMode::FrozenOnly => layout.set_trainable(|_| true, false),
        TrainMode::Peft => {
            if adapter.variant == Variant::BitFit {
                layout.set_trainable(|s| is_bitfit_bias(&s.name), true);
            }
            layout.set_trainable(|s| s.name.starts_with(HEAD_PREFIX), true);
        }
    }
    Ok((layout, bank))
}

#[derive(Debug, Clone)]
pub struct Model<S> {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub mode: TrainMode,
    pub bank: AdapterBank,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(encoder: &EncoderConfig, adapter: &AdapterConfig, mode: TrainMode, rng: &SplitRng) -> Result<Self> {
        let (layout, bank) = model_layout(encoder, adapter, mode)?;
        Ok(Self {
            encoder: encoder.clone(),
            adapter: adapter.resolved(),
            mode,
            bank,
            params: layout.materialize(rng),
        })
    }

    /// Wraps existing parameters, checking names and shapes against the layout.
    pub fn from_params(
        encoder: &EncoderConfig,
        adapter: &AdapterConfig,
        mode: TrainMode,
        params: ParamStore<S>,
    ) -> Result<Self> {
        let (layout, bank) = model_layout(encoder, adapter, mode)?;
        if layout.specs().len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model expects {}",
                params.len(),
                layout.specs().len()
            )));
        }
        for spec in layout.specs() {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self {
            encoder: encoder.clone(),
            adapter: adapter.resolved(),
            mode,
            bank,
            params,
        })
    }

    pub fn bind(&self, g: &mut Graph<S>, track_grads: bool) -> Bound {
        self.params.bind(g, track_grads)
    }

    /// Encoder output on the graph.
    pub fn hidden(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Result<Var> {
        encoder_forward(g, &self.encoder, bound, x, Some(&self.bank))
    }

    /// Logits `[B, 2]` on the graph.
    pub fn forward(&self, g: &mut Graph<S>, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden(g, bound, x)?;
        classify(g, bound, h, self.bank.prompt_len())
    }

    /// Encoder output for a batch, without gradient tracking.
    pub fn encode(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = self.hidden(&mut g, &bound, xv)?;
        Ok(g.value(h)?.clone())
    }

    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y)?.clone())
    }

    /// Bonafide-minus-spoof score per input sequence.
    pub fn scores(&self, x: &Tensor<S>) -> Result<Vec<S>> {
        Ok(scores_from_logits(&self.logits(x)?))
    }

    /// Trainable parameters excluding the classification head.
    pub fn adaptation_param_count(&self) -> u64 {
        self.params
            .count_where(|e| e.trainable && !e.name.starts_with(HEAD_PREFIX))
    }
}
