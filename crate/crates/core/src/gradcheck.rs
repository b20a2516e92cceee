//! Central finite-difference checks for every differentiable op, adapter and
//! the encoder.
//!
//! Each case builds a function of a few random leaves and reduces its output
//! to a scalar with a fixed random projection `L = sum(out * R)`. Analytic
//! gradients from one backward pass are compared with
//! `(L(x + eps) - L(x - eps)) / (2 eps)` for every input element, using
//! relative error `|a - n| / max(|a|, |n|, REL_FLOOR)`.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{multiconv_forward, AdapterConfig, Fusion, HoulsbyParams, MultiConvParams, Variant};
use crate::adapters::{houlsby_forward, lora_forward, mixup_fuse, prompt_prepend};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Model, TrainMode};
use crate::nn::{classify, encoder_forward, Bound, EncoderConfig};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 20;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    /// Input index and element where the worst error was seen.
    pub worst: (usize, usize),
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// One trial: leaves, which of them are checked, and the function under test.
pub struct Trial {
    pub inputs: Vec<Tensor<f64>>,
    pub checked: Vec<bool>,
    pub build: Box<Build>,
}

impl Trial {
    fn all(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        let checked = vec![true; inputs.len()];
        Self {
            inputs,
            checked,
            build: Box::new(build),
        }
    }
}

fn eval(trial: &Trial, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (trial.build)(&mut g, &vars)?;
    let y = g.value(out)?;
    Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// Worst relative error of one trial and where it occurred.
pub fn check_trial(trial: &Trial, rng: &mut ChaCha8Rng) -> Result<(f64, (usize, usize))> {
    let mut g = Graph::new();
    let vars: Vec<Var> = trial
        .inputs
        .iter()
        .zip(&trial.checked)
        .map(|(t, &c)| g.leaf(t.clone().with_requires_grad(c)))
        .collect();
    let out = (trial.build)(&mut g, &vars)?;
    let proj = Tensor::randn(g.shape(out)?, 1.0, rng);
    let r = g.constant(proj.clone());
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod)?;
    g.backward(loss)?;

    let mut worst = (0.0, (0, 0));
    let mut inputs = trial.inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        if !trial.checked[i] {
            continue;
        }
        let grad = g.grad(*var)?;
        for j in 0..inputs[i].numel() {
            let analytic = grad.as_ref().map_or(0.0, |t| t.data()[j]);
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + EPS;
            let up = eval(trial, &inputs, &proj)?;
            inputs[i].data_mut()[j] = x0 - EPS;
            let down = eval(trial, &inputs, &proj)?;
            inputs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * EPS);
            let e = relative_error(analytic, numeric);
            if !e.is_finite() {
                return Err(Error::Malformed(format!("non-finite gradient at input {i}, element {j}")));
            }
            if e > worst.0 {
                worst = (e, (i, j));
            }
        }
    }
    Ok(worst)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

fn odd_kernel(rng: &mut ChaCha8Rng) -> usize {
    2 * dim(rng, 0, 3) + 1
}

/// A named family of randomized trials.
pub struct Case {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Trial,
}

fn op_cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 4)];
                Trial::all(vec![randn(&s, 1.0, r), randn(&s, 1.0, r)], |g, v| g.add(v[0], v[1]))
            },
        },
        Case {
            name: "add_broadcast",
            make: |r| {
                let (m, n) = (dim(r, 1, 3), dim(r, 1, 4));
                Trial::all(vec![randn(&[2, m, n], 1.0, r), randn(&[n], 1.0, r)], |g, v| g.add(v[0], v[1]))
            },
        },
        Case {
            name: "mul",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 4)];
                Trial::all(vec![randn(&s, 1.0, r), randn(&s, 1.0, r)], |g, v| g.mul(v[0], v[1]))
            },
        },
        Case {
            name: "scale",
            make: |r| {
                let c = r.random_range(-2.0..2.0);
                Trial::all(vec![randn(&[dim(r, 1, 5)], 1.0, r)], move |g, v| g.scale(v[0], c))
            },
        },
        Case {
            name: "scale_by",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 4)];
                Trial::all(vec![randn(&s, 1.0, r), randn(&[1], 1.0, r)], |g, v| g.scale_by(v[0], v[1]))
            },
        },
        Case {
            name: "matmul",
            make: |r| {
                let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                Trial::all(vec![randn(&[m, k], 1.0, r), randn(&[k, n], 1.0, r)], |g, v| g.matmul(v[0], v[1]))
            },
        },
        Case {
            name: "matmul_batched",
            make: |r| {
                let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
                let shared = r.random_bool(0.5);
                let bshape = if shared { vec![k, n] } else { vec![b, k, n] };
                Trial::all(vec![randn(&[2, b, m, k], 1.0, r), randn(&bshape, 1.0, r)], |g, v| {
                    g.matmul(v[0], v[1])
                })
            },
        },
        Case {
            name: "transpose",
            make: |r| {
                let s = [dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4)];
                Trial::all(vec![randn(&s, 1.0, r)], |g, v| g.transpose(v[0]))
            },
        },
        Case {
            name: "permute",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
                let mut axes = [0usize, 1, 2];
                for i in (1..3).rev() {
                    axes.swap(i, dim(r, 0, i));
                }
                Trial::all(vec![randn(&s, 1.0, r)], move |g, v| g.permute(v[0], &axes))
            },
        },
        Case {
            name: "reshape",
            make: |r| {
                let (a, b) = (dim(r, 1, 3), dim(r, 1, 3));
                Trial::all(vec![randn(&[a, b, 2], 1.0, r)], move |g, v| g.reshape(v[0], &[2 * b, a]))
            },
        },
        Case {
            name: "concat",
            make: |r| {
                let axis = dim(r, 0, 2);
                let n = dim(r, 2, 3);
                let base = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
                let inputs = (0..n)
                    .map(|_| {
                        let mut s = base;
                        s[axis] = dim(r, 1, 3);
                        randn(&s, 1.0, r)
                    })
                    .collect();
                Trial::all(inputs, move |g, v| g.concat(v, axis))
            },
        },
        Case {
            name: "split",
            make: |r| {
                let axis = dim(r, 0, 1);
                let mut s = [dim(r, 1, 3), dim(r, 1, 3)];
                let (p, q) = (dim(r, 1, 3), dim(r, 1, 3));
                s[axis] = p + q;
                let pick = dim(r, 0, 1);
                Trial::all(vec![randn(&s, 1.0, r)], move |g, v| Ok(g.split(v[0], axis, &[p, q])?[pick]))
            },
        },
        Case {
            name: "expand",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 3)];
                let lead = dim(r, 1, 3);
                Trial::all(vec![randn(&s, 1.0, r)], move |g, v| g.expand(v[0], &[lead]))
            },
        },
        Case {
            name: "softmax",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 5)];
                Trial::all(vec![randn(&s, 2.0, r)], |g, v| g.softmax(v[0]))
            },
        },
        Case {
            name: "log_softmax",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 5)];
                Trial::all(vec![randn(&s, 2.0, r)], |g, v| g.log_softmax(v[0]))
            },
        },
        Case {
            name: "gelu",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 5)];
                Trial::all(vec![randn(&s, 2.0, r)], |g, v| g.gelu(v[0]))
            },
        },
        Case {
            name: "layer_norm",
            make: |r| {
                let (m, n) = (dim(r, 1, 3), dim(r, 2, 6));
                let inputs = vec![randn(&[m, n], 1.0, r), randn(&[n], 1.0, r), randn(&[n], 1.0, r)];
                Trial::all(inputs, |g, v| g.layer_norm(v[0], v[1], v[2]))
            },
        },
        Case {
            name: "mean",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
                let axis = dim(r, 0, 2);
                Trial::all(vec![randn(&s, 1.0, r)], move |g, v| g.mean(v[0], axis))
            },
        },
        Case {
            name: "sum",
            make: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 4)];
                Trial::all(vec![randn(&s, 1.0, r)], |g, v| g.sum(v[0]))
            },
        },
        Case {
            name: "log_softmax_nll",
            make: |r| {
                let (b, c) = (dim(r, 1, 4), dim(r, 2, 4));
                let targets: Vec<usize> = (0..b).map(|_| dim(r, 0, c - 1)).collect();
                Trial::all(vec![randn(&[b, c], 2.0, r)], move |g, v| {
                    let lp = g.log_softmax(v[0])?;
                    g.nll(lp, &targets)
                })
            },
        },
        Case {
            name: "cross_entropy",
            make: |r| {
                let b = dim(r, 1, 4);
                let targets: Vec<usize> = (0..b).map(|_| dim(r, 0, 1)).collect();
                Trial::all(vec![randn(&[b, 2], 2.0, r)], move |g, v| g.cross_entropy(v[0], &targets))
            },
        },
        Case {
            name: "depthwise_conv1d",
            make: |r| {
                let (b, c, t) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 8));
                let k = odd_kernel(r);
                Trial::all(vec![randn(&[b, c, t], 1.0, r), randn(&[c, k], 1.0, r)], |g, v| {
                    g.depthwise_conv1d(v[0], v[1])
                })
            },
        },
    ]
}

fn multiconv_trial(r: &mut ChaCha8Rng, fusion: Fusion, branches: usize) -> Trial {
    let (b, t, d) = (dim(r, 1, 2), dim(r, 2, 6), dim(r, 2, 4));
    let bottleneck = if branches > 0 && fusion.splits_channels() { branches * dim(r, 1, 2) } else { dim(r, 1, 4) };
    let channels = if fusion.splits_channels() && branches > 0 { bottleneck / branches } else { bottleneck };
    let mut inputs = vec![randn(&[b, t, d], 1.0, r), randn(&[d, bottleneck], 0.7, r)];
    for _ in 0..branches {
        let k = odd_kernel(r);
        inputs.push(randn(&[channels, k], 0.7, r));
    }
    let extra = match fusion {
        Fusion::MixupConv if branches > 0 => {
            inputs.push(randn(&[bottleneck, 3], 0.5, r));
            1
        }
        Fusion::WeightedSum if branches > 0 => {
            inputs.push(randn(&[branches], 1.0, r));
            1
        }
        _ => 0,
    };
    inputs.push(randn(&[bottleneck, d], 0.7, r));
    Trial::all(inputs, move |g, v| {
        let convs = v[2..2 + branches].to_vec();
        let fuse = (extra == 1).then(|| v[2 + branches]);
        let p = MultiConvParams {
            down: v[1],
            convs,
            mix: fuse.filter(|_| fusion == Fusion::MixupConv),
            alpha: fuse.filter(|_| fusion == Fusion::WeightedSum),
            up: *v.last().expect("up projection"),
        };
        multiconv_forward(g, v[0], &p, fusion)
    })
}

fn adapter_cases() -> Vec<Case> {
    vec![
        Case {
            name: "multiconv_mixup",
            make: |r| {
                let n = dim(r, 1, 3);
                multiconv_trial(r, Fusion::MixupConv, n)
            },
        },
        Case {
            name: "multiconv_concat",
            make: |r| {
                let n = dim(r, 1, 3);
                multiconv_trial(r, Fusion::Concat, n)
            },
        },
        Case {
            name: "multiconv_sum",
            make: |r| {
                let n = dim(r, 1, 3);
                multiconv_trial(r, Fusion::Sum, n)
            },
        },
        Case {
            name: "multiconv_weighted_sum",
            make: |r| {
                let n = dim(r, 1, 3);
                multiconv_trial(r, Fusion::WeightedSum, n)
            },
        },
        Case {
            name: "multiconv_no_kernels",
            make: |r| multiconv_trial(r, Fusion::MixupConv, 0),
        },
        Case {
            name: "mixup_fuse",
            make: |r| {
                let (b, c, t) = (dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 6));
                Trial::all(vec![randn(&[b, c, t], 1.0, r), randn(&[c, 3], 0.5, r)], |g, v| {
                    mixup_fuse(g, v[0], v[1])
                })
            },
        },
        Case {
            name: "houlsby",
            make: |r| {
                let (b, t, d, m) = (dim(r, 1, 2), dim(r, 1, 4), dim(r, 2, 5), dim(r, 1, 3));
                let inputs = vec![
                    randn(&[b, t, d], 1.0, r),
                    randn(&[d], 1.0, r),
                    randn(&[d], 1.0, r),
                    randn(&[d, m], 0.7, r),
                    randn(&[m], 0.5, r),
                    randn(&[m, d], 0.7, r),
                    randn(&[d], 0.5, r),
                ];
                Trial::all(inputs, |g, v| {
                    let p = HoulsbyParams {
                        ln_weight: v[1],
                        ln_bias: v[2],
                        down_weight: v[3],
                        down_bias: v[4],
                        up_weight: v[5],
                        up_bias: v[6],
                    };
                    houlsby_forward(g, v[0], &p)
                })
            },
        },
        Case {
            name: "lora",
            make: |r| {
                let (b, t, d, rank) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 2, 5), dim(r, 1, 2));
                let inputs = vec![
                    randn(&[b, t, d], 1.0, r),
                    randn(&[d, d], 0.7, r),
                    randn(&[d], 0.5, r),
                    randn(&[d, rank], 0.7, r),
                    randn(&[rank, d], 0.7, r),
                ];
                Trial::all(inputs, |g, v| lora_forward(g, v[0], v[1], Some(v[2]), v[3], v[4]))
            },
        },
        Case {
            name: "prompt_prepend",
            make: |r| {
                let (b, t, d, p) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3));
                Trial::all(vec![randn(&[b, t, d], 1.0, r), randn(&[p, d], 1.0, r)], |g, v| {
                    prompt_prepend(g, v[0], v[1])
                })
            },
        },
    ]
}

/// `L=1, D=8, H=2, T=4` encoder used by the end-to-end checks.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        model_dim: 8,
        inner_dim: 16,
        num_heads: 2,
        input_dim: 3,
        max_seq_len: 8,
        pre_norm: true,
        positional: true,
    }
}

fn tiny_adapter(variant: Variant) -> AdapterConfig {
    let mut cfg = AdapterConfig::of_variant(variant);
    cfg.kernels = vec![1, 3];
    cfg.bottleneck = 4;
    cfg.rank = 2;
    cfg.prompt_tokens = 2;
    cfg
}

/// Whole-model trial: checks the input and every trainable parameter, after
/// replacing all parameters with random values so no gradient path is
/// trivially zero.
fn encoder_trial(r: &mut ChaCha8Rng, enc: EncoderConfig, adapter: AdapterConfig, mode: TrainMode) -> Trial {
    let model = Model::<f64>::new(&enc, &adapter, mode, &SplitRng::new(r.next_u64())).expect("tiny model config is valid");
    let (b, t) = (dim(r, 1, 2), dim(r, 1, 4));
    let mut inputs = vec![randn(&[b, t, enc.input_dim], 1.0, r)];
    let mut checked = vec![true];
    let mut names = Vec::new();
    for e in model.params.iter() {
        inputs.push(randn(e.tensor.shape(), 0.5, r));
        checked.push(e.trainable);
        names.push(e.name.clone());
    }
    let build = move |g: &mut Graph<f64>, v: &[Var]| {
        let bound = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
        let h = encoder_forward(g, &model.encoder, &bound, v[0], Some(&model.bank))?;
        classify(g, &bound, h, model.bank.prompt_len())
    };
    Trial {
        inputs,
        checked,
        build: Box::new(build),
    }
}

fn encoder_cases() -> Vec<Case> {
    vec![
        Case {
            name: "encoder_full",
            make: |r| encoder_trial(r, tiny_encoder(), AdapterConfig::none(), TrainMode::FullTune),
        },
        Case {
            name: "encoder_post_norm",
            make: |r| {
                let enc = EncoderConfig {
                    pre_norm: false,
                    ..tiny_encoder()
                };
                encoder_trial(r, enc, AdapterConfig::none(), TrainMode::FullTune)
            },
        },
        Case {
            name: "encoder_multiconv",
            make: |r| encoder_trial(r, tiny_encoder(), tiny_adapter(Variant::MultiConv), TrainMode::Peft),
        },
        Case {
            name: "encoder_houlsby",
            make: |r| encoder_trial(r, tiny_encoder(), tiny_adapter(Variant::Houlsby), TrainMode::Peft),
        },
        Case {
            name: "encoder_lora",
            make: |r| encoder_trial(r, tiny_encoder(), tiny_adapter(Variant::Lora), TrainMode::Peft),
        },
        Case {
            name: "encoder_bitfit",
            make: |r| encoder_trial(r, tiny_encoder(), tiny_adapter(Variant::BitFit), TrainMode::Peft),
        },
        Case {
            name: "encoder_prompt",
            make: |r| encoder_trial(r, tiny_encoder(), tiny_adapter(Variant::Prompt), TrainMode::Peft),
        },
    ]
}

/// Every registered case: primitive ops, adapters, then whole encoders.
pub fn all_cases() -> Vec<Case> {
    let mut v = op_cases();
    v.extend(adapter_cases());
    v.extend(encoder_cases());
    v
}

pub fn run_case(case: &Case, trials: usize, rng: &SplitRng) -> Result<CaseReport> {
    let mut stream = rng.child_named(case.name).stream();
    let mut report = CaseReport {
        name: case.name,
        trials,
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    for _ in 0..trials {
        let trial = (case.make)(&mut stream);
        let (e, at) = check_trial(&trial, &mut stream)?;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = at;
        }
    }
    Ok(report)
}

pub fn run_all(trials: usize, seed: u64) -> Result<Vec<CaseReport>> {
    let rng = SplitRng::new(seed);
    all_cases().iter().map(|c| run_case(c, trials, &rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x * x) differentiated as if it were sum(x): the harness must notice.
        let trial = Trial::all(vec![Tensor::from_f64(&[3], &[1.0, -2.0, 0.5])], |g, v| {
            let frozen = g.constant(g.value(v[0])?.clone());
            g.mul(v[0], frozen)
        });
        let (e, _) = check_trial(&trial, &mut SplitRng::new(3).stream()).unwrap();
        assert!(e > 0.3, "{e}");
    }

    #[test]
    fn case_names_are_unique() {
        let names: std::collections::HashSet<_> = all_cases().iter().map(|c| c.name).collect();
        assert_eq!(names.len(), all_cases().len());
    }

    #[test]
    fn every_case_passes_a_few_trials() {
        for r in run_all(3, 11).unwrap() {
            assert!(r.passed(), "{} max rel err {:.3e} at {:?}", r.name, r.max_rel_err, r.worst);
        }
    }
}
