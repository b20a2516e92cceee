//! Synthetic spoofing corpus.
//!
//! Bonafide records are smooth feature sequences: a unit-variance AR(1)
//! process per feature plus a few slow shared sinusoids. Spoofed records carry
//! either short additive bursts (at most a few frames), a slow multiplicative
//! amplitude modulation over the whole record, or both.
//!
//! Record `i` draws from `SplitRng::new(seed).child(i)` only, so the corpus
//! does not depend on generation order or thread count.
//!
//! File layout (little-endian): magic `SPFB`, version `u16`, record count,
//! frames and features as `u32`, then per record: id `u32`, label `u8`,
//! artifact class `u8`, `T * F` values as `f32`.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::eval::Label;
use crate::rng::SplitRng;
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: [u8; 4] = *b"SPFB";
pub const CORPUS_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 4;
pub const RECORD_HEADER_BYTES: usize = 4 + 1 + 1;
pub const AR_COEFF: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactClass {
    None,
    Short,
    Long,
    Mixed,
}

impl ArtifactClass {
    pub const ALL: [ArtifactClass; 4] = [Self::None, Self::Short, Self::Long, Self::Mixed];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn label(self) -> Label {
        match self {
            Self::None => Label::Bonafide,
            _ => Label::Spoof,
        }
    }

    fn has_short(self) -> bool {
        matches!(self, Self::Short | Self::Mixed)
    }

    fn has_long(self) -> bool {
        matches!(self, Self::Long | Self::Mixed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpoofRecord {
    pub id: u32,
    pub label: Label,
    pub class: ArtifactClass,
    /// `[T, F]`.
    pub features: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub frames: usize,
    pub features: usize,
    pub records: Vec<SpoofRecord>,
}

/// Share of each artifact class; bonafide is the `none` class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Proportions {
    pub bonafide: f64,
    pub short: f64,
    pub long: f64,
    pub mixed: f64,
}

impl Default for Proportions {
    fn default() -> Self {
        Self {
            bonafide: 0.5,
            short: 1.0 / 6.0,
            long: 1.0 / 6.0,
            mixed: 1.0 / 6.0,
        }
    }
}

impl Proportions {
    fn as_array(&self) -> [f64; 4] {
        [self.bonafide, self.short, self.long, self.mixed]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_records: usize,
    pub frames: usize,
    pub features: usize,
    pub proportions: Proportions,
    /// Standard deviation of the burst offset vectors.
    pub burst_amplitude: f64,
    pub burst_count_min: usize,
    pub burst_count_max: usize,
    pub burst_len_max: usize,
    pub mod_period_min: f64,
    pub mod_period_max: f64,
    pub mod_depth: f64,
    pub sine_amplitude: f64,
    pub sine_period_min: f64,
    pub sine_period_max: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_records: 2000,
            frames: 200,
            features: 16,
            proportions: Proportions::default(),
            burst_amplitude: 4.0,
            burst_count_min: 6,
            burst_count_max: 10,
            burst_len_max: 3,
            mod_period_min: 40.0,
            mod_period_max: 120.0,
            mod_depth: 0.8,
            sine_amplitude: 0.5,
            sine_period_min: 150.0,
            sine_period_max: 600.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let p = self.proportions.as_array();
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("data proportions {p:?} must be in [0, 1] and sum to 1"));
        }
        if self.num_records == 0 || self.frames == 0 || self.features == 0 {
            return fail("data extents must be >= 1".into());
        }
        if self.num_records > u32::MAX as usize {
            return fail("num_records exceeds the u32 id range".into());
        }
        if self.burst_len_max == 0 || self.burst_count_min > self.burst_count_max {
            return fail("burst length must be >= 1 and burst_count_min <= burst_count_max".into());
        }
        // non-touching bursts must fit
        if self.burst_count_max * (self.burst_len_max + 1) > self.frames {
            return fail(format!(
                "{} bursts of {} frames do not fit in {} frames",
                self.burst_count_max, self.burst_len_max, self.frames
            ));
        }
        if !(self.mod_period_min > 0.0 && self.mod_period_min <= self.mod_period_max) {
            return fail("modulation periods must satisfy 0 < min <= max".into());
        }
        if !(self.sine_period_min > 0.0 && self.sine_period_min <= self.sine_period_max) {
            return fail("sinusoid periods must satisfy 0 < min <= max".into());
        }
        if self.burst_amplitude < 0.0 || !(0.0..1.0).contains(&self.mod_depth) || self.sine_amplitude < 0.0 {
            return fail("amplitudes must be >= 0 and modulation depth in [0, 1)".into());
        }
        Ok(())
    }

    /// Exact per-class counts, rounding by largest remainder.
    pub fn class_counts(&self) -> [usize; 4] {
        let n = self.num_records;
        let exact = self.proportions.as_array().map(|p| p * n as f64);
        let mut counts = exact.map(|x| x.floor() as usize);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let mut left = n - counts.iter().sum::<usize>();
        for i in order.into_iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }

    /// Artifact class of every record, in id order.
    pub fn class_plan(&self) -> Vec<ArtifactClass> {
        let mut plan: Vec<ArtifactClass> = ArtifactClass::ALL
            .iter()
            .zip(self.class_counts())
            .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
            .collect();
        plan.shuffle(&mut SplitRng::new(self.seed).child_named("classes").stream());
        plan
    }

    pub fn file_size(&self) -> usize {
        HEADER_BYTES + self.num_records * (RECORD_HEADER_BYTES + self.frames * self.features * 4)
    }
}

/// Artifact-free signal `[T, F]` in 64-bit.
pub fn base_signal(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (t_len, f_len) = (spec.frames, spec.features);
    let innovation = (1.0 - AR_COEFF * AR_COEFF).sqrt();
    let mut x = vec![0.0; t_len * f_len];
    for f in 0..f_len {
        let mut v: f64 = rng.sample(StandardNormal);
        for t in 0..t_len {
            if t > 0 {
                v = AR_COEFF * v + innovation * rng.sample::<f64, _>(StandardNormal);
            }
            x[t * f_len + f] = v;
        }
    }
    let sines = rng.random_range(2..=4);
    for _ in 0..sines {
        let period = rng.random_range(spec.sine_period_min..=spec.sine_period_max);
        let phase = rng.random_range(0.0..TAU);
        let gains: Vec<f64> = (0..f_len)
            .map(|_| spec.sine_amplitude * rng.random_range(-1.0..=1.0))
            .collect();
        for t in 0..t_len {
            let s = (TAU * t as f64 / period + phase).sin();
            for f in 0..f_len {
                x[t * f_len + f] += gains[f] * s;
            }
        }
    }
    x
}

/// Non-touching bursts as `(start, len)`, sorted by start.
pub fn burst_windows(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let count = rng.random_range(spec.burst_count_min..=spec.burst_count_max);
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.random_range(1..=spec.burst_len_max);
        let start = rng.random_range(0..=spec.frames - len);
        let clear = out.iter().all(|&(s, l)| start > s + l || s > start + len);
        if clear {
            out.push((start, len));
        }
    }
    out.sort_unstable();
    out
}

/// Adds one random offset vector over each burst window.
pub fn apply_short(spec: &CorpusSpec, x: &mut [f64], rng: &mut ChaCha8Rng) {
    let f_len = spec.features;
    for (start, len) in burst_windows(spec, rng) {
        let offset: Vec<f64> = (0..f_len)
            .map(|_| spec.burst_amplitude * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for t in start..start + len {
            for (f, o) in offset.iter().enumerate() {
                x[t * f_len + f] += o;
            }
        }
    }
}

/// Per-frame gain `1 + depth * sin(2 pi t / P + phi)`.
pub fn modulation_gain(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let period = rng.random_range(spec.mod_period_min..=spec.mod_period_max);
    let phase = rng.random_range(0.0..TAU);
    (0..spec.frames)
        .map(|t| 1.0 + spec.mod_depth * (TAU * t as f64 / period + phase).sin())
        .collect()
}

pub fn apply_long(spec: &CorpusSpec, x: &mut [f64], rng: &mut ChaCha8Rng) {
    let gain = modulation_gain(spec, rng);
    for (row, g) in x.chunks_mut(spec.features).zip(gain) {
        row.iter_mut().for_each(|v| *v *= g);
    }
}

/// Record `id` with the given class, independent of every other record.
pub fn generate_record(spec: &CorpusSpec, id: u32, class: ArtifactClass) -> SpoofRecord {
    let root = SplitRng::new(spec.seed).child(id as u64);
    let mut x = base_signal(spec, &mut root.child_named("base").stream());
    if class.has_long() {
        apply_long(spec, &mut x, &mut root.child_named("long").stream());
    }
    if class.has_short() {
        apply_short(spec, &mut x, &mut root.child_named("short").stream());
    }
    let data = x.into_iter().map(|v| v as f32).collect();
    SpoofRecord {
        id,
        label: class.label(),
        class,
        features: Tensor::new(&[spec.frames, spec.features], data).expect("sized by spec"),
    }
}

/// Generates on the current rayon pool.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let plan = spec.class_plan();
    let records = plan
        .par_iter()
        .enumerate()
        .map(|(i, &c)| generate_record(spec, i as u32, c))
        .collect();
    Ok(Corpus {
        frames: spec.frames,
        features: spec.features,
        records,
    })
}

/// Generates with exactly `workers` threads.
pub fn generate_with_workers(spec: &CorpusSpec, workers: usize) -> Result<Corpus> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| generate(spec))
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.len() * (RECORD_HEADER_BYTES + self.frames * self.features * 4));
        out.extend_from_slice(&CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        for n in [self.records.len(), self.frames, self.features] {
            let n = u32::try_from(n).map_err(|_| Error::Malformed(format!("extent {n} exceeds u32")))?;
            out.extend_from_slice(&n.to_le_bytes());
        }
        for r in &self.records {
            if r.features.shape() != [self.frames, self.features] {
                return Err(Error::Malformed(format!(
                    "record {} has shape {:?}, corpus is [{}, {}]",
                    r.id,
                    r.features.shape(),
                    self.frames,
                    self.features
                )));
            }
            out.extend_from_slice(&r.id.to_le_bytes());
            out.push(r.label.index() as u8);
            out.push(r.class.tag());
            for v in r.features.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(CORPUS_MAGIC, CORPUS_VERSION)?;
        let n = r.u32("record count")? as usize;
        let frames = r.u32("frame count")? as usize;
        let features = r.u32("feature count")? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = r.u32("record id")?;
            let label = Label::from_index(r.u8("label")?)?;
            let tag = r.u8("artifact class")?;
            let class = ArtifactClass::from_tag(tag)
                .ok_or_else(|| Error::Malformed(format!("record {id}: artifact class {tag}")))?;
            if class.label() != label {
                return Err(Error::Malformed(format!(
                    "record {id}: label {} contradicts artifact class {class:?}",
                    label.name()
                )));
            }
            let raw = r.take(frames * features * 4, "record values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(SpoofRecord {
                id,
                label,
                class,
                features: Tensor::new(&[frames, features], data)?,
            });
        }
        r.finish()?;
        Ok(Self {
            frames,
            features,
            records,
        })
    }

    /// Stacks records into a `[B, T, F]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.frames * self.features);
        for &i in indices {
            data.extend_from_slice(self.records[i].features.data());
        }
        Tensor::new(&[indices.len(), self.frames, self.features], data).expect("records share one shape")
    }
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, corpus.encode()?)?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests;
