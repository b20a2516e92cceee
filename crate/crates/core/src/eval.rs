//! Equal error rate over bonafide-minus-spoof scores.
//!
//! Operating points are taken at every unique score `t`:
//! `FRR(t)` is the share of bonafide scores `<= t`, `FAR(t)` the share of
//! spoof scores `> t`. A leading point at `t = -inf` (FRR 0, FAR 1) closes
//! the curve. The EER is where `FAR - FRR` reaches zero, linearly
//! interpolated between the two bracketing points; an exact zero at a
//! sampled point wins, taking the lowest such threshold.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    /// Class index used by the classifier head.
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(Label::Bonafide),
            1 => Ok(Label::Spoof),
            _ => Err(Error::Malformed(format!("label byte {i}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<(Label, f64)>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: Label, score: f64) {
        self.entries.push((label, score));
    }

    pub fn from_parts(bonafide: &[f64], spoof: &[f64]) -> Self {
        let entries = bonafide
            .iter()
            .map(|&s| (Label::Bonafide, s))
            .chain(spoof.iter().map(|&s| (Label::Spoof, s)))
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub eer_percent: f64,
    pub threshold_at_eer: f64,
    pub num_bonafide: usize,
    pub num_spoof: usize,
}

pub fn compute_eer(scores: &ScoreSet) -> Result<EvalResult> {
    let mut sorted: Vec<(f64, Label)> = scores.entries.iter().map(|&(l, s)| (s, l)).collect();
    if let Some((s, _)) = sorted.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::Malformed(format!("score {s} is not a number")));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nb = sorted.iter().filter(|e| e.1 == Label::Bonafide).count();
    let ns = sorted.len() - nb;
    if nb == 0 {
        return Err(Error::UndefinedEer("no bonafide scores"));
    }
    if ns == 0 {
        return Err(Error::UndefinedEer("no spoof scores"));
    }

    // (threshold, frr, far) with the leading -inf point
    let mut prev = (f64::NEG_INFINITY, 0.0, 1.0);
    let (mut b_le, mut s_le) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            match sorted[i].1 {
                Label::Bonafide => b_le += 1,
                Label::Spoof => s_le += 1,
            }
            i += 1;
        }
        let frr = b_le as f64 / nb as f64;
        let far = (ns - s_le) as f64 / ns as f64;
        let d = far - frr;
        if d == 0.0 {
            return Ok(result(frr, t, nb, ns));
        }
        if d < 0.0 {
            let d0 = prev.2 - prev.1;
            let lambda = d0 / (d0 - d);
            let eer = prev.1 + lambda * (frr - prev.1);
            let threshold = if prev.0.is_finite() { prev.0 + lambda * (t - prev.0) } else { t };
            return Ok(result(eer, threshold, nb, ns));
        }
        prev = (t, frr, far);
    }
    unreachable!("FRR reaches 1 and FAR reaches 0 at the largest score")
}

fn result(rate: f64, threshold: f64, nb: usize, ns: usize) -> EvalResult {
    EvalResult {
        eer_percent: 100.0 * rate,
        threshold_at_eer: threshold,
        num_bonafide: nb,
        num_spoof: ns,
    }
}
