//! Baseline PEFT methods: LoRA, Houlsby bottleneck adapters, BitFit and
//! prompt tuning.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Bound, Init, ParamLayout, ParamStore};
use crate::scalar::Scalar;

/// Attention projections that receive low-rank updates.
pub const LORA_TARGETS: [&str; 4] = ["q", "k", "v", "out"];

/// `x W (+ bias) + (x A) B`, scaling factor 1.
pub fn lora_forward<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    w_frozen: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
) -> Result<Var> {
    let base = g.matmul(x, w_frozen)?;
    let base = match bias {
        Some(bias) => g.add(base, bias)?,
        None => base,
    };
    let low = g.matmul(x, a)?;
    let delta = g.matmul(low, b)?;
    g.add(base, delta)
}

pub(crate) fn register_lora(layout: &mut ParamLayout, layer_prefix: &str, model_dim: usize, rank: usize) -> Result<()> {
    for proj in LORA_TARGETS {
        let p = format!("{layer_prefix}.attn.{proj}");
        layout.push(
            format!("{p}.lora_a"),
            &[model_dim, rank],
            true,
            Init::Normal {
                std: 1.0 / (model_dim as f64).sqrt(),
            },
        )?;
        layout.push(format!("{p}.lora_b"), &[rank, model_dim], true, Init::Zeros)?;
    }
    Ok(())
}

pub struct HoulsbyParams {
    pub ln_weight: Var,
    pub ln_bias: Var,
    pub down_weight: Var,
    pub down_bias: Var,
    pub up_weight: Var,
    pub up_bias: Var,
}

impl HoulsbyParams {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let get = |s: &str| bound.get(&format!("{prefix}.{s}"));
        Ok(Self {
            ln_weight: get("ln.weight")?,
            ln_bias: get("ln.bias")?,
            down_weight: get("down.weight")?,
            down_bias: get("down.bias")?,
            up_weight: get("up.weight")?,
            up_bias: get("up.bias")?,
        })
    }
}

pub(crate) fn register_houlsby(layout: &mut ParamLayout, prefix: &str, model_dim: usize, bottleneck: usize) -> Result<()> {
    layout.push(format!("{prefix}.ln.weight"), &[model_dim], true, Init::Ones)?;
    layout.push(format!("{prefix}.ln.bias"), &[model_dim], true, Init::Zeros)?;
    layout.push(
        format!("{prefix}.down.weight"),
        &[model_dim, bottleneck],
        true,
        Init::Normal {
            std: 1.0 / (model_dim as f64).sqrt(),
        },
    )?;
    layout.push(format!("{prefix}.down.bias"), &[bottleneck], true, Init::Zeros)?;
    layout.push(format!("{prefix}.up.weight"), &[bottleneck, model_dim], true, Init::Zeros)?;
    layout.push(format!("{prefix}.up.bias"), &[model_dim], true, Init::Zeros)
}

/// `GELU(LN(a) W_down + b_down) W_up + b_up`; the caller adds it residually.
pub fn houlsby_forward<S: Scalar>(g: &mut Graph<S>, a: Var, p: &HoulsbyParams) -> Result<Var> {
    let n = g.layer_norm(a, p.ln_weight, p.ln_bias)?;
    let h = g.matmul(n, p.down_weight)?;
    let h = g.add(h, p.down_bias)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, p.up_weight)?;
    g.add(y, p.up_bias)
}

/// Whether a backbone parameter is one of the bias vectors BitFit trains:
/// attention projections, both FFN layers and both block LayerNorms.
pub fn is_bitfit_bias(name: &str) -> bool {
    let Some(rest) = name.strip_prefix("layers.") else {
        return false;
    };
    let Some((_, local)) = rest.split_once('.') else {
        return false;
    };
    matches!(
        local,
        "attn.q.bias"
            | "attn.k.bias"
            | "attn.v.bias"
            | "attn.out.bias"
            | "ffn.fc1.bias"
            | "ffn.fc2.bias"
            | "ln1.bias"
            | "ln2.bias"
    )
}

/// Marks exactly the BitFit bias set trainable and freezes everything else
/// except names for which `keep` returns true.
pub fn bitfit_mark<S: Scalar>(params: &mut ParamStore<S>, keep: impl Fn(&str) -> bool) {
    for e in params.iter_mut() {
        e.trainable = is_bitfit_bias(&e.name) || keep(&e.name);
    }
}

/// Prepends prompt tokens `[P, D]` to every sequence of `x: [B, T, D]`.
pub fn prompt_prepend<S: Scalar>(g: &mut Graph<S>, x: Var, prompts: Var) -> Result<Var> {
    let (sx, sp) = (g.shape(x)?.to_vec(), g.shape(prompts)?.to_vec());
    if sx.len() != 3 || sp.len() != 2 || sp[1] != sx[2] {
        return shape_err("prompt_prepend", format!("prompts {sp:?} for input {sx:?}"));
    }
    if sp[0] == 0 {
        return Ok(x);
    }
    let p = g.expand(prompts, &[sx[0]])?;
    g.concat(&[p, x], 1)
}

pub(crate) fn register_prompt(layout: &mut ParamLayout, model_dim: usize, tokens: usize) -> Result<()> {
    layout.push("prompt", &[tokens, model_dim], true, Init::Normal { std: 0.02 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;
    use crate::tensor::Tensor;

    type G = Graph<f64>;

    #[test]
    fn lora_with_zero_b_is_frozen_projection() {
        let mut rng = SplitRng::new(1).stream();
        let mut g = G::new();
        let x = g.constant(Tensor::randn(&[2, 3, 8], 1.0, &mut rng));
        let w = g.constant(Tensor::randn(&[8, 8], 1.0, &mut rng));
        let bias = g.constant(Tensor::randn(&[8], 1.0, &mut rng));
        let a = g.constant(Tensor::randn(&[8, 2], 1.0, &mut rng));
        let b = g.constant(Tensor::zeros(&[2, 8]));
        let y = lora_forward(&mut g, x, w, Some(bias), a, b).unwrap();
        let base = g.matmul(x, w).unwrap();
        let base = g.add(base, bias).unwrap();
        assert!(g.value(y).unwrap().bit_eq(g.value(base).unwrap()));
    }

    #[test]
    fn lora_full_rank_identity_a() {
        let mut rng = SplitRng::new(2).stream();
        let d = 4;
        let mut eye = Tensor::<f64>::zeros(&[d, d]);
        for i in 0..d {
            eye.set(&[i, i], 1.0);
        }
        let mut g = G::new();
        let x = g.constant(Tensor::randn(&[3, d], 1.0, &mut rng));
        let w = g.constant(Tensor::randn(&[d, d], 1.0, &mut rng));
        let bm = g.constant(Tensor::randn(&[d, d], 1.0, &mut rng));
        let a = g.constant(eye);
        let y = lora_forward(&mut g, x, w, None, a, bm).unwrap();
        let xw = g.matmul(x, w).unwrap();
        let xb = g.matmul(x, bm).unwrap();
        let expect = g.add(xw, xb).unwrap();
        assert!(g.value(y).unwrap().max_abs_diff(g.value(expect).unwrap()) < 1e-12);
    }

    #[test]
    fn lora_matches_dense_update() {
        let mut rng = SplitRng::new(3).stream();
        let (din, dout, r) = (6, 5, 2);
        let x = Tensor::<f64>::randn(&[4, din], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[din, dout], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[din, r], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[r, dout], 1.0, &mut rng);
        // materialise W + A B and apply it directly
        let mut dense = w.clone();
        for i in 0..din {
            for j in 0..dout {
                let ab: f64 = (0..r).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum();
                dense.set(&[i, j], w.at(&[i, j]) + ab);
            }
        }
        let mut g = G::new();
        let (xv, wv, av, bv) = (g.constant(x.clone()), g.constant(w), g.constant(a), g.constant(b));
        let y = lora_forward(&mut g, xv, wv, None, av, bv).unwrap();
        let y = g.value(y).unwrap();
        for n in 0..4 {
            for j in 0..dout {
                let expect: f64 = (0..din).map(|i| x.at(&[n, i]) * dense.at(&[i, j])).sum();
                assert!((y.at(&[n, j]) - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn houlsby_zero_up_is_zero() {
        let mut rng = SplitRng::new(4).stream();
        let mut layout = ParamLayout::new();
        register_houlsby(&mut layout, "h", 8, 3).unwrap();
        let store: ParamStore<f64> = layout.materialize(&SplitRng::new(9));
        let mut g = G::new();
        let bound = store.bind(&mut g, false);
        let p = HoulsbyParams::bind(&bound, "h").unwrap();
        let a = g.constant(Tensor::randn(&[2, 5, 8], 1.0, &mut rng));
        let y = houlsby_forward(&mut g, a, &p).unwrap();
        assert!(g.value(y).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bitfit_bias_names() {
        assert!(is_bitfit_bias("layers.3.attn.q.bias"));
        assert!(is_bitfit_bias("layers.0.ln2.bias"));
        assert!(is_bitfit_bias("layers.11.ffn.fc1.bias"));
        assert!(!is_bitfit_bias("layers.0.attn.q.weight"));
        assert!(!is_bitfit_bias("layers.0.ln1.weight"));
        assert!(!is_bitfit_bias("final_ln.bias"));
        assert!(!is_bitfit_bias("input.bias"));
        assert!(!is_bitfit_bias("layers.0.adapter.mhsa.up"));
    }

    #[test]
    fn prompt_prepend_shapes() {
        let mut rng = SplitRng::new(5).stream();
        let x = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng);
        let mut g = G::new();
        let xv = g.constant(x.clone());
        let empty = g.constant(Tensor::zeros(&[0, 3]));
        let y = prompt_prepend(&mut g, xv, empty).unwrap();
        assert_eq!(y, xv);
        let prompts = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let pv = g.constant(prompts.clone());
        let y = prompt_prepend(&mut g, xv, pv).unwrap();
        let y = g.value(y).unwrap();
        assert_eq!(y.shape(), &[2, 9, 3]);
        assert_eq!(y.at(&[1, 2, 1]), prompts.at(&[2, 1]));
        assert_eq!(y.at(&[1, 7, 2]), x.at(&[1, 2, 2]));
    }
}
