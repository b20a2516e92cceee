//! Transformer encoder over precomputed feature frames, with optional
//! adapter branches, and the pooled linear classification head.
//!
//! Parameter names: `input.*`, `layers.{l}.{ln1,ln2}.*`,
//! `layers.{l}.attn.{q,k,v,out}.*`, `layers.{l}.ffn.{fc1,fc2}.*`,
//! `final_ln.*`, `head.*`.

use crate::adapters::{lora_forward, prompt_prepend, AdapterBank, Site};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, EncoderConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class index of genuine inputs; spoofed inputs are class 1.
pub const BONAFIDE_CLASS: usize = 0;
pub const SPOOF_CLASS: usize = 1;

pub fn sinusoidal_positions<S: Scalar>(len: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            data.push(S::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[len, dim], data).expect("sized above")
}

fn linear<S: Scalar>(g: &mut Graph<S>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, bound.get(&format!("{prefix}.weight"))?)?;
    g.add(y, bound.get(&format!("{prefix}.bias"))?)
}

fn layer_norm<S: Scalar>(g: &mut Graph<S>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{prefix}.weight"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, w, b)
}

fn projection<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    bank: Option<&AdapterBank>,
    layer: usize,
    proj: &str,
    x: Var,
) -> Result<Var> {
    let prefix = format!("layers.{layer}.attn.{proj}");
    match bank.map(|b| b.lora_factors(bound, layer, proj)).transpose()?.flatten() {
        Some((a, b)) => {
            let w = bound.get(&format!("{prefix}.weight"))?;
            let bias = bound.get(&format!("{prefix}.bias"))?;
            lora_forward(g, x, w, Some(bias), a, b)
        }
        None => linear(g, bound, &prefix, x),
    }
}

/// Multi-head self-attention output together with its attention weights
/// `[B, H, T, T]`.
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// Unmasked scaled dot-product self-attention of layer `layer`.
pub fn mhsa_with_weights<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &EncoderConfig,
    bound: &Bound,
    layer: usize,
    x: Var,
    bank: Option<&AdapterBank>,
) -> Result<Attention> {
    let s = g.shape(x)?.to_vec();
    if s.len() != 3 || s[2] != cfg.model_dim {
        return shape_err("mhsa", format!("input {s:?}, model_dim {}", cfg.model_dim));
    }
    if cfg.model_dim % cfg.num_heads != 0 {
        return shape_err("mhsa", format!("{} heads do not divide {}", cfg.num_heads, cfg.model_dim));
    }
    let (b, t, h, dh) = (s[0], s[1], cfg.num_heads, cfg.head_dim());
    let heads = |g: &mut Graph<S>, proj: &str, axes: &[usize]| -> Result<Var> {
        let y = projection(g, bound, bank, layer, proj, x)?;
        let y = g.reshape(y, &[b, t, h, dh])?;
        g.permute(y, axes)
    };
    let q = heads(g, "q", &[0, 2, 1, 3])?;
    // scaling q is cheaper than scaling the [T, T] scores
    let q = g.scale(q, S::of(1.0 / (dh as f64).sqrt()))?;
    let kt = heads(g, "k", &[0, 2, 3, 1])?;
    let v = heads(g, "v", &[0, 2, 1, 3])?;
    let scores = g.matmul(q, kt)?;
    let weights = g.softmax(scores)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, cfg.model_dim])?;
    let output = projection(g, bound, bank, layer, "out", ctx)?;
    Ok(Attention { output, weights })
}

pub fn mhsa<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &EncoderConfig,
    bound: &Bound,
    layer: usize,
    x: Var,
    bank: Option<&AdapterBank>,
) -> Result<Var> {
    Ok(mhsa_with_weights(g, cfg, bound, layer, x, bank)?.output)
}

pub fn ffn<S: Scalar>(g: &mut Graph<S>, bound: &Bound, layer: usize, x: Var) -> Result<Var> {
    let h = linear(g, bound, &format!("layers.{layer}.ffn.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, bound, &format!("layers.{layer}.ffn.fc2"), h)
}

/// `h + y + adapter(y)`, the adapter term only when one sits at `site`.
fn residual<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    bank: Option<&AdapterBank>,
    layer: usize,
    site: Site,
    h: Var,
    y: Var,
) -> Result<Var> {
    let h = g.add(h, y)?;
    match bank {
        Some(bank) => match bank.site_forward(g, bound, layer, site, y)? {
            Some(delta) => g.add(h, delta),
            None => Ok(h),
        },
        None => Ok(h),
    }
}

/// Runs `x: [B, T, F]` through the encoder, returning `[B, P + T, D]` where
/// `P` is the number of prompt tokens (zero unless prompt tuning is active).
pub fn encoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &EncoderConfig,
    bound: &Bound,
    x: Var,
    bank: Option<&AdapterBank>,
) -> Result<Var> {
    let s = g.shape(x)?.to_vec();
    if s.len() != 3 || s[2] != cfg.input_dim {
        return shape_err("encoder", format!("input {s:?}, expected [B, T, {}]", cfg.input_dim));
    }
    if s[1] > cfg.max_seq_len {
        return shape_err("encoder", format!("sequence length {} > max_seq_len {}", s[1], cfg.max_seq_len));
    }
    if let Some(bank) = bank {
        if bank.num_layers() != cfg.num_layers {
            return Err(Error::Config(format!(
                "adapter bank has {} layers, encoder has {}",
                bank.num_layers(),
                cfg.num_layers
            )));
        }
    }
    let mut h = linear(g, bound, "input", x)?;
    if cfg.positional {
        let pos = g.constant(sinusoidal_positions(s[1], cfg.model_dim));
        h = g.add(h, pos)?;
    }
    if bank.is_some_and(|b| b.prompt_len() > 0) {
        h = prompt_prepend(g, h, bound.get("prompt")?)?;
    }
    for layer in 0..cfg.num_layers {
        let ln1 = format!("layers.{layer}.ln1");
        let ln2 = format!("layers.{layer}.ln2");
        if cfg.pre_norm {
            let n = layer_norm(g, bound, &ln1, h)?;
            let a = mhsa(g, cfg, bound, layer, n, bank)?;
            h = residual(g, bound, bank, layer, Site::Mhsa, h, a)?;
            let n = layer_norm(g, bound, &ln2, h)?;
            let f = ffn(g, bound, layer, n)?;
            h = residual(g, bound, bank, layer, Site::Ffn, h, f)?;
        } else {
            let a = mhsa(g, cfg, bound, layer, h, bank)?;
            let r = residual(g, bound, bank, layer, Site::Mhsa, h, a)?;
            h = layer_norm(g, bound, &ln1, r)?;
            let f = ffn(g, bound, layer, h)?;
            let r = residual(g, bound, bank, layer, Site::Ffn, h, f)?;
            h = layer_norm(g, bound, &ln2, r)?;
        }
    }
    if cfg.pre_norm {
        h = layer_norm(g, bound, "final_ln", h)?;
    }
    Ok(h)
}

/// Mean-pools `h: [B, T, D]` over positions `skip..T`, then applies the
/// affine head `D -> 2`.
pub fn classify<S: Scalar>(g: &mut Graph<S>, bound: &Bound, h: Var, skip: usize) -> Result<Var> {
    let s = g.shape(h)?.to_vec();
    if s.len() != 3 || skip >= s[1] {
        return shape_err("classify", format!("hidden {s:?} with {skip} skipped positions"));
    }
    let h = if skip > 0 { g.narrow(h, 1, skip, s[1] - skip)? } else { h };
    let pooled = g.mean(h, 1)?;
    linear(g, bound, "head", pooled)
}

/// Detection score per row of `[B, 2]` logits: bonafide minus spoof logit.
pub fn scores_from_logits<S: Scalar>(logits: &Tensor<S>) -> Vec<S> {
    logits
        .data()
        .chunks(2)
        .map(|row| row[BONAFIDE_CLASS] - row[SPOOF_CLASS])
        .collect()
}
