//! Multi-scale convolutional adapter.
//!
//! `a -> down (D -> D') -> parallel depthwise branches (one kernel size each,
//! GELU after every branch) -> fusion -> up (D' -> D)`. The up-projection is
//! zero-initialised so a fresh adapter contributes exactly nothing.

use crate::adapters::config::{AdapterConfig, Fusion};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Bound, Init, ParamLayout};
use crate::scalar::Scalar;

pub struct MultiConvParams {
    pub down: Var,
    pub convs: Vec<Var>,
    pub mix: Option<Var>,
    pub alpha: Option<Var>,
    pub up: Var,
}

pub(crate) fn register(layout: &mut ParamLayout, prefix: &str, cfg: &AdapterConfig, model_dim: usize) -> Result<()> {
    let bottleneck = cfg.bottleneck;
    let init_std = |fan_in: usize| Init::Normal {
        std: 1.0 / (fan_in as f64).sqrt(),
    };
    layout.push(format!("{prefix}.down"), &[model_dim, bottleneck], true, init_std(model_dim))?;
    let channels = cfg.branch_channels();
    for (i, &k) in cfg.kernels.iter().enumerate() {
        layout.push(format!("{prefix}.conv.{i}"), &[channels, k], true, init_std(k))?;
    }
    if !cfg.kernels.is_empty() {
        match cfg.fusion {
            Fusion::MixupConv => layout.push(format!("{prefix}.mix"), &[bottleneck, 3], true, Init::Normal { std: 0.1 })?,
            Fusion::WeightedSum => layout.push(
                format!("{prefix}.alpha"),
                &[cfg.kernels.len()],
                true,
                Init::Const(1.0 / cfg.kernels.len() as f64),
            )?,
            Fusion::Sum | Fusion::Concat => {}
        }
    }
    layout.push(format!("{prefix}.up"), &[bottleneck, model_dim], true, Init::Zeros)
}

impl MultiConvParams {
    pub fn bind(bound: &Bound, prefix: &str, cfg: &AdapterConfig) -> Result<Self> {
        let has_branches = !cfg.kernels.is_empty();
        Ok(Self {
            down: bound.get(&format!("{prefix}.down"))?,
            convs: (0..cfg.kernels.len())
                .map(|i| bound.get(&format!("{prefix}.conv.{i}")))
                .collect::<Result<_>>()?,
            mix: (has_branches && cfg.fusion == Fusion::MixupConv)
                .then(|| bound.get(&format!("{prefix}.mix")))
                .transpose()?,
            alpha: (has_branches && cfg.fusion == Fusion::WeightedSum)
                .then(|| bound.get(&format!("{prefix}.alpha")))
                .transpose()?,
            up: bound.get(&format!("{prefix}.up"))?,
        })
    }
}

/// Adapter output for a sublayer activation `a: [B, T, D]`; the caller adds
/// it to the residual stream.
pub fn multiconv_forward<S: Scalar>(g: &mut Graph<S>, a: Var, p: &MultiConvParams, fusion: Fusion) -> Result<Var> {
    let h = g.matmul(a, p.down)?;
    if p.convs.is_empty() {
        let h = g.gelu(h)?;
        return g.matmul(h, p.up);
    }
    let hc = g.permute(h, &[0, 2, 1])?;
    let bottleneck = g.shape(hc)?[1];
    let fused = if fusion.splits_channels() {
        let n = p.convs.len();
        if bottleneck % n != 0 {
            return shape_err("multiconv", format!("bottleneck {bottleneck} not divisible by {n} branches"));
        }
        let groups = g.split(hc, 1, &vec![bottleneck / n; n])?;
        let branches = groups
            .into_iter()
            .zip(&p.convs)
            .map(|(x, &w)| conv_branch(g, x, w))
            .collect::<Result<Vec<_>>>()?;
        let cat = aggregate(g, &branches, Fusion::Concat, None)?;
        match (fusion, p.mix) {
            (Fusion::MixupConv, Some(w)) => mixup_fuse(g, cat, w)?,
            (Fusion::MixupConv, None) => return shape_err("multiconv", "mixup fusion without mixing kernel"),
            _ => cat,
        }
    } else {
        let branches = p
            .convs
            .iter()
            .map(|&w| conv_branch(g, hc, w))
            .collect::<Result<Vec<_>>>()?;
        aggregate(g, &branches, fusion, p.alpha)?
    };
    let back = g.permute(fused, &[0, 2, 1])?;
    g.matmul(back, p.up)
}

fn conv_branch<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var) -> Result<Var> {
    let y = g.depthwise_conv1d(x, w)?;
    g.gelu(y)
}

/// Residual depthwise kernel-3 mixing over `[B, D', T]`: `h + conv(h, w_mix)`.
pub fn mixup_fuse<S: Scalar>(g: &mut Graph<S>, h: Var, w_mix: Var) -> Result<Var> {
    let k = g.shape(w_mix)?.get(1).copied();
    if k != Some(3) {
        return shape_err("mixup_fuse", format!("mixing kernel must have width 3, shape {:?}", g.shape(w_mix)?));
    }
    let mixed = g.depthwise_conv1d(h, w_mix)?;
    g.add(h, mixed)
}

/// Combines branch outputs `[B, C, T]`.
///
/// `Concat` stacks the branches along channels, `Sum` adds them and
/// `WeightedSum` adds them scaled by the entries of `alpha` (shape `[N]`).
/// `MixupConv` is the concatenation here; its mixing step is [`mixup_fuse`].
pub fn aggregate<S: Scalar>(g: &mut Graph<S>, branches: &[Var], mode: Fusion, alpha: Option<Var>) -> Result<Var> {
    if branches.is_empty() {
        return shape_err("aggregate", "no branches");
    }
    match mode {
        Fusion::Concat | Fusion::MixupConv => {
            if branches.len() == 1 {
                Ok(branches[0])
            } else {
                g.concat(branches, 1)
            }
        }
        Fusion::Sum => {
            let mut acc = branches[0];
            for &b in &branches[1..] {
                acc = g.add(acc, b)?;
            }
            Ok(acc)
        }
        Fusion::WeightedSum => {
            let Some(alpha) = alpha else {
                return shape_err("aggregate", "weighted sum needs branch weights");
            };
            if g.shape(alpha)? != [branches.len()] {
                return shape_err(
                    "aggregate",
                    format!("{} weights for {} branches", g.shape(alpha)?.iter().product::<usize>(), branches.len()),
                );
            }
            let mut acc: Option<Var> = None;
            for (i, &b) in branches.iter().enumerate() {
                let w = g.narrow(alpha, 0, i, 1)?;
                let term = g.scale_by(b, w)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            Ok(acc.expect("non-empty"))
        }
    }
}
