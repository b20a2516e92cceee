//! Adam with decoupled weight decay, the cross-entropy training loop, and
//! evaluation on the held-out split.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{compute_eer, EvalResult, Label, ScoreSet};
use crate::model::{Model, TrainMode};
use crate::nn::ParamStore;
use crate::rng::{splitmix64, SplitRng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Settings for the pretrained-scale backbone.
    pub fn pretrained() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 14,
            seed: 0,
            mode: TrainMode::Peft,
        }
    }

    /// Settings for the small randomly initialised backbone.
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            ..Self::pretrained()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pretrained" | "xlsr" => Ok(Self::pretrained()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown training preset `{other}` (expected toy or pretrained)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "train settings need lr > 0, 0 < beta1, beta2 < 1, eps > 0, weight_decay >= 0, batch_size >= 1: {self:?}"
            )))
        }
    }
}

/// First and second moments per parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S> {
    pub step: u64,
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[S], &[S])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepReport {
    pub updated: usize,
    /// Trainable parameters that had no gradient and were left untouched.
    pub skipped: Vec<String>,
}

/// One Adam update of every trainable parameter that carries a gradient.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, state: &mut AdamState<S>, cfg: &TrainConfig) -> StepReport {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let c1 = S::one() - S::of(cfg.beta1.powi(t));
    let c2 = S::one() - S::of(cfg.beta2.powi(t));
    let lr = S::of(cfg.lr);
    let eps = S::of(cfg.eps);
    let decay = S::one() - S::of(cfg.lr * cfg.weight_decay);
    let mut report = StepReport::default();
    for e in params.iter_mut() {
        if !e.trainable {
            continue;
        }
        let Some(grad) = e.tensor.grad().map(<[S]>::to_vec) else {
            report.skipped.push(e.name.clone());
            continue;
        };
        let n = grad.len();
        let (m, v) = state
            .moments
            .entry(e.name.clone())
            .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
        for (((x, &g), m), v) in e.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x = *x * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        report.updated += 1;
    }
    report
}

/// Deterministic 80/20 split on a hash of the record id.
pub fn is_dev(id: u32) -> bool {
    splitmix64(id as u64 ^ 0x5E_EDD0_u64) % 100 < 20
}

/// Indices of the training and development records.
pub fn split(corpus: &Corpus) -> (Vec<usize>, Vec<usize>) {
    let (dev, train): (Vec<usize>, Vec<usize>) = (0..corpus.len()).partition(|&i| is_dev(corpus.records[i].id));
    (train, dev)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<S> {
    pub log: Vec<EpochLog>,
    /// Parameters at the epoch with the lowest development EER (earliest on ties).
    pub best: ParamStore<S>,
    pub best_epoch: usize,
    pub best_dev_eer: f64,
    pub skipped_updates: usize,
}

/// One scored record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredRecord {
    pub id: u32,
    pub label: Label,
    pub score: f64,
}

pub const EVAL_BATCH: usize = 64;

/// Scores the given records with frozen parameters.
pub fn score_records<S: Scalar>(model: &Model<S>, corpus: &Corpus, indices: &[usize]) -> Result<Vec<ScoredRecord>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = corpus.batch(chunk).cast::<S>();
        let scores = model.scores(&x)?;
        for (&i, s) in chunk.iter().zip(scores) {
            let r = &corpus.records[i];
            out.push(ScoredRecord {
                id: r.id,
                label: r.label,
                score: s.to_f64_lossy(),
            });
        }
    }
    Ok(out)
}

pub fn score_set(scored: &[ScoredRecord]) -> ScoreSet {
    ScoreSet {
        entries: scored.iter().map(|r| (r.label, r.score)).collect(),
    }
}

pub fn evaluate<S: Scalar>(model: &Model<S>, corpus: &Corpus, indices: &[usize]) -> Result<(EvalResult, Vec<ScoredRecord>)> {
    let scored = score_records(model, corpus, indices)?;
    Ok((compute_eer(&score_set(&scored))?, scored))
}

/// Mean cross-entropy of one minibatch; fills gradients on trainable params
/// when any exist.
pub fn batch_step<S: Scalar>(model: &mut Model<S>, corpus: &Corpus, batch: &[usize]) -> Result<f64> {
    let trainable = model.params.trainable_count() > 0;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, trainable);
    let x = g.constant(corpus.batch(batch).cast::<S>());
    let targets: Vec<usize> = batch.iter().map(|&i| corpus.records[i].label.index()).collect();
    let logits = model.forward(&mut g, &bound, x)?;
    let loss = g.cross_entropy(logits, &targets)?;
    let value = g.value(loss)?.item().to_f64_lossy();
    if trainable && value.is_finite() {
        g.backward(loss)?;
        model.params.collect_grads(&g, &bound)?;
    }
    Ok(value)
}

/// Trains `model` in place and returns the log with the best checkpoint.
pub fn train<S: Scalar>(model: &mut Model<S>, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    train_with(model, corpus, cfg, |_| ControlFlow::Continue(()))
}

/// As [`train`], calling `on_epoch` after each epoch is logged. Returning
/// `Break` ends training after that epoch.
pub fn train_with<S: Scalar>(
    model: &mut Model<S>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> ControlFlow<()>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if model.mode != cfg.mode {
        return Err(Error::Config(format!(
            "model built for {} mode, training config asks for {}",
            model.mode.name(),
            cfg.mode.name()
        )));
    }
    let (train_idx, dev_idx) = split(corpus);
    if train_idx.is_empty() || dev_idx.is_empty() {
        return Err(Error::Config(format!(
            "corpus of {} records leaves an empty train or dev split",
            corpus.len()
        )));
    }
    for label in [Label::Bonafide, Label::Spoof] {
        if !dev_idx.iter().any(|&i| corpus.records[i].label == label) {
            return Err(Error::Config(format!("development split has no {} records", label.name())));
        }
    }
    let root = SplitRng::new(cfg.seed);
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = model.params.clone();
    let mut best_epoch = 0;
    let mut best_dev_eer = evaluate(model, corpus, &dev_idx)?.0.eer_percent;
    let mut skipped_updates = 0;
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut root.child(epoch as u64).stream());
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let loss = batch_step(model, corpus, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += loss * batch.len() as f64;
            if model.params.trainable_count() > 0 {
                skipped_updates += adam_step(&mut model.params, &mut state, cfg).skipped.len();
            }
        }
        model.params.zero_grads();
        let dev_eer = evaluate(model, corpus, &dev_idx)?.0.eer_percent;
        let entry = EpochLog {
            epoch,
            train_loss: total / order.len() as f64,
            dev_eer,
        };
        let flow = on_epoch(&entry);
        log.push(entry);
        if dev_eer < best_dev_eer {
            best_dev_eer = dev_eer;
            best_epoch = epoch;
            best = model.params.clone();
        }
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        log,
        best,
        best_epoch,
        best_dev_eer,
        skipped_updates,
    })
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,dev_eer\n");
    for e in log {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.dev_eer);
    }
    s
}

pub fn scores_csv(scored: &[ScoredRecord]) -> String {
    let mut s = String::from("record_id,label,score\n");
    for r in scored {
        let _ = writeln!(s, "{},{},{}", r.id, r.label.name(), r.score);
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
