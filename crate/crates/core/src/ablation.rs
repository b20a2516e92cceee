//! Train-and-evaluate sweeps over one adapter axis and several seeds.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::adapters::{AdapterConfig, Fusion, Placement, Variant};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::EncoderConfig;
use crate::rng::SplitRng;
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig};

/// Environment variable capping the number of concurrent runs.
pub const THREADS_ENV: &str = "ADAPTLAB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Kernels,
    Aggregation,
    Placement,
    Method,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Kernels, Axis::Aggregation, Axis::Placement, Axis::Method];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Kernels => "kernels",
            Axis::Aggregation => "aggregation",
            Axis::Placement => "placement",
            Axis::Method => "method",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}` (kernels, aggregation, placement, method)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub axis_value: String,
    pub adapter: AdapterConfig,
}

pub fn kernels_label(kernels: &[usize]) -> String {
    if kernels.is_empty() {
        "none".into()
    } else {
        kernels.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+")
    }
}

/// The standard grid for `axis`, varying only that axis of `base`.
pub fn default_grid(axis: Axis, base: &AdapterConfig) -> Vec<GridPoint> {
    let point = |axis_value: String, adapter: AdapterConfig| GridPoint { axis_value, adapter };
    match axis {
        Axis::Kernels => [vec![], vec![3], vec![15], vec![3, 23], vec![3, 7, 15, 23]]
            .into_iter()
            .map(|k| {
                let mut a = base.clone();
                a.variant = Variant::MultiConv;
                a.kernels = k;
                point(kernels_label(&a.kernels), a)
            })
            .collect(),
        Axis::Aggregation => [Fusion::Sum, Fusion::Concat, Fusion::WeightedSum, Fusion::MixupConv]
            .into_iter()
            .map(|f| {
                let mut a = base.clone().with_fusion(f);
                a.variant = Variant::MultiConv;
                point(f.name().into(), a)
            })
            .collect(),
        Axis::Placement => [Placement::Mhsa, Placement::Ffn, Placement::Both]
            .into_iter()
            .map(|p| {
                let mut a = base.clone().with_placement(p);
                a.variant = Variant::MultiConv;
                point(p.name().into(), a)
            })
            .collect(),
        Axis::Method => Variant::ALL
            .into_iter()
            .map(|v| {
                let mut a = base.clone();
                a.variant = v;
                a.placement = None;
                point(v.name().into(), a)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub config_id: usize,
    pub axis_value: String,
    pub seed: u64,
    /// Best development EER in percent; `None` when the run failed.
    pub eer: Option<f64>,
    pub params: u64,
    pub error: Option<String>,
}

/// Worker count from the environment, defaulting to the available cores.
pub fn thread_budget() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_one<S: Scalar>(
    encoder: &EncoderConfig,
    adapter: &AdapterConfig,
    base: &TrainConfig,
    corpus: &Corpus,
    seed: u64,
) -> Result<(f64, u64)> {
    let cfg = TrainConfig { seed, ..base.clone() };
    let mut model = Model::<S>::new(encoder, adapter, cfg.mode, &SplitRng::new(seed))?;
    let params = model.adaptation_param_count();
    let outcome = train(&mut model, corpus, &cfg)?;
    Ok((outcome.best_dev_eer, params))
}

/// Trains every grid point under every seed. Failed runs are recorded and
/// do not stop the sweep. Rows come back in grid-then-seed order regardless
/// of `threads`.
pub fn run_ablation<S: Scalar>(
    grid: &[GridPoint],
    encoder: &EncoderConfig,
    base: &TrainConfig,
    corpus: &Corpus,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<AblationRun>> {
    let jobs: Vec<(usize, &GridPoint, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(i, p)| seeds.iter().map(move |&s| (i, p, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|&(config_id, point, seed)| {
                let (eer, params, error) = match run_one::<S>(encoder, &point.adapter, base, corpus, seed) {
                    Ok((eer, params)) => (Some(eer), params, None),
                    Err(e) => (None, 0, Some(e.to_string())),
                };
                AblationRun {
                    config_id,
                    axis_value: point.axis_value.clone(),
                    seed,
                    eer,
                    params,
                    error,
                }
            })
            .collect()
    });
    Ok(runs)
}

pub const RUNS_CSV_HEADER: &str = "config_id,axis_value,seed,eer,params";

pub fn runs_csv(runs: &[AblationRun]) -> String {
    let mut s = String::from(RUNS_CSV_HEADER);
    s.push('\n');
    for r in runs {
        let eer = r.eer.map_or_else(|| "nan".to_string(), |e| e.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", r.config_id, r.axis_value, r.seed, eer, r.params);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub config_id: usize,
    pub axis_value: String,
    pub mean_eer: f64,
    /// Sample standard deviation; zero for a single run.
    pub stdev_eer: f64,
    pub runs: usize,
    pub failed: usize,
    pub params: u64,
}

pub fn summarize(runs: &[AblationRun]) -> Vec<Summary> {
    let mut ids: Vec<usize> = runs.iter().map(|r| r.config_id).collect();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let group: Vec<&AblationRun> = runs.iter().filter(|r| r.config_id == id).collect();
            let eers: Vec<f64> = group.iter().filter_map(|r| r.eer).collect();
            let n = eers.len();
            let mean = if n == 0 { f64::NAN } else { eers.iter().sum::<f64>() / n as f64 };
            let stdev = if n < 2 {
                0.0
            } else {
                (eers.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            Summary {
                config_id: id,
                axis_value: group[0].axis_value.clone(),
                mean_eer: mean,
                stdev_eer: stdev,
                runs: group.len(),
                failed: group.len() - n,
                params: group.iter().map(|r| r.params).max().unwrap_or(0),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[Summary]) -> String {
    let mut s = String::from("config_id,axis_value,mean_eer,stdev_eer,runs,failed,params\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.config_id, r.axis_value, r.mean_eer, r.stdev_eer, r.runs, r.failed, r.params
        );
    }
    s
}
