use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptlab_core::ablation::{self, Axis};
use adaptlab_core::audit;
use adaptlab_core::config::ExperimentConfig;
use adaptlab_core::data::{generate, read_corpus, write_corpus, Corpus};
use adaptlab_core::gradcheck;
use adaptlab_core::nn::checkpoint::{read_checkpoint, write_checkpoint};
use adaptlab_core::train::{self, evaluate, log_csv, scores_csv, split, write_text};
use adaptlab_core::{Error, Model, SplitRng, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multi-scale convolutional adapters on a small transformer: data
/// generation, training, evaluation, parameter audits and ablations.
#[derive(Debug, Parser)]
#[command(name = "adaptlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Preset for every config section: toy or xlsr
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Adapter variant: multiconv, houlsby, lora, bitfit, prompt, none
    #[arg(long, value_name = "NAME")]
    method: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus file
    GenData {
        #[command(flatten)]
        common: Common,
        /// Alias for --config
        #[arg(long, value_name = "PATH", conflicts_with = "config")]
        spec: Option<PathBuf>,
        /// Corpus seed (overrides data.seed)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "PATH", default_value = "corpus.spfb")]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, training log and dev scores into --out
    Train {
        #[command(flatten)]
        common: Common,
        /// Training seed (overrides train.seed)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR", default_value = "run")]
        out: PathBuf,
    },
    /// Score a split with a checkpoint and report the EER
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Dev)]
        split: Split,
        /// Score CSV path
        #[arg(long, value_name = "PATH", default_value = "scores.csv")]
        out: PathBuf,
    },
    /// Audit trainable adaptation parameters
    CountParams {
        #[command(flatten)]
        common: Common,
        /// Print the per-site breakdown as well
        #[arg(long)]
        sites: bool,
        /// Also write the table as CSV
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train every point of an ablation grid under several seeds
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Number of seeds, counting up from --seed
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// First seed (defaults to train.seed)
        #[arg(long)]
        seed: Option<u64>,
        /// Per-run CSV; the summary goes next to it with a `.summary.csv` suffix
        #[arg(long, value_name = "PATH", default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// Run every op and adapter case
        #[arg(long, conflicts_with = "op")]
        all: bool,
        /// Run the named case only
        #[arg(long, value_name = "NAME")]
        op: Option<String>,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Dev,
    Train,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Kernels,
    Aggregation,
    Placement,
    Method,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Kernels => Axis::Kernels,
            AxisArg::Aggregation => Axis::Aggregation,
            AxisArg::Placement => Axis::Placement,
            AxisArg::Method => Axis::Method,
        }
    }
}

/// Validation problems exit with 1, everything else with 2.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(common: &Common, path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let preset = common.preset.as_deref();
    let mut cfg = match path.or(common.config.as_deref()) {
        Some(p) => ExperimentConfig::load(p, preset)?,
        None => ExperimentConfig::preset(preset.unwrap_or("toy"))?,
    };
    if let Some(m) = &common.method {
        cfg.adapter.variant = Variant::parse(m)?;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_config(cfg: &ExperimentConfig) {
    println!("# resolved config");
    print!("{}", cfg.to_toml());
    println!();
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus, Failure> {
    let corpus = match &cfg.data.corpus {
        Some(path) => read_corpus(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
        None => generate(&cfg.data.spec)?,
    };
    if corpus.features != cfg.encoder.input_dim {
        return Err(Failure::Invalid(format!(
            "corpus frames have {} features, encoder.input_dim is {}",
            corpus.features, cfg.encoder.input_dim
        )));
    }
    if corpus.frames > cfg.encoder.max_seq_len {
        return Err(Failure::Invalid(format!(
            "corpus has {} frames, encoder.max_seq_len is {}",
            corpus.frames, cfg.encoder.max_seq_len
        )));
    }
    Ok(corpus)
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn gen_data(common: &Common, spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Outcome {
    let mut cfg = load_config(common, spec)?;
    if let Some(s) = seed {
        cfg.data.spec.seed = s;
    }
    print_config(&cfg);
    let corpus = generate(&cfg.data.spec)?;
    write_corpus(&corpus, out)?;
    let [none, short, long, mixed] = cfg.data.spec.class_counts();
    println!(
        "wrote {} records ({none} bonafide, {short} short, {long} long, {mixed} mixed) to {}",
        corpus.len(),
        out.display()
    );
    Ok(())
}

fn run_train(common: &Common, seed: Option<u64>, out: &Path) -> Outcome {
    let mut cfg = load_config(common, None)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    print_config(&cfg);
    let corpus = load_corpus(&cfg)?;
    let mut model = Model::<f32>::new(&cfg.encoder, &cfg.adapter, cfg.train.mode, &SplitRng::new(cfg.train.seed))?;
    println!(
        "{} trainable adaptation parameters, {} trainable in total",
        model.adaptation_param_count(),
        model.params.trainable_count()
    );
    let outcome = train::train_with(&mut model, &corpus, &cfg.train, |e| {
        println!("epoch {:>3}  train_loss {:.6}  dev_eer {:.3}%", e.epoch, e.train_loss, e.dev_eer);
        ControlFlow::Continue(())
    })?;
    model.params = outcome.best;
    let (_, dev) = split(&corpus);
    let (result, scored) = evaluate(&model, &corpus, &dev)?;
    create_dir(out)?;
    write_checkpoint(&model.params, out.join("checkpoint.adlb"))?;
    write_text(out.join("train_log.csv"), &log_csv(&outcome.log))?;
    write_text(out.join("dev_scores.csv"), &scores_csv(&scored))?;
    write_text(out.join("config.toml"), &cfg.to_toml())?;
    println!(
        "best epoch {} with dev EER {:.3}% (threshold {:.6}); outputs in {}",
        outcome.best_epoch,
        result.eer_percent,
        result.threshold_at_eer,
        out.display()
    );
    Ok(())
}

fn run_eval(common: &Common, checkpoint: &Path, which: Split, out: &Path) -> Outcome {
    let cfg = load_config(common, None)?;
    print_config(&cfg);
    let corpus = load_corpus(&cfg)?;
    let params = read_checkpoint::<f32>(checkpoint).map_err(|e| Failure::Runtime(format!("{}: {e}", checkpoint.display())))?;
    let model = Model::from_params(&cfg.encoder, &cfg.adapter, cfg.train.mode, params)?;
    let (train_idx, dev_idx) = split(&corpus);
    let indices: Vec<usize> = match which {
        Split::Dev => dev_idx,
        Split::Train => train_idx,
        Split::All => (0..corpus.len()).collect(),
    };
    let (result, scored) = evaluate(&model, &corpus, &indices)?;
    write_text(out, &scores_csv(&scored))?;
    println!("records      {}", scored.len());
    println!("bonafide     {}", result.num_bonafide);
    println!("spoof        {}", result.num_spoof);
    println!("eer_percent  {:.6}", result.eer_percent);
    println!("threshold    {:.6}", result.threshold_at_eer);
    println!("scores written to {}", out.display());
    Ok(())
}

fn count_params(common: &Common, sites: bool, out: Option<&Path>) -> Outcome {
    let cfg = load_config(common, None)?;
    print_config(&cfg);
    let rows = if common.method.is_some() || common.config.is_some() {
        vec![audit::audit(&cfg.encoder, &cfg.adapter)?]
    } else {
        audit::audit_table(&cfg.encoder, &Variant::ALL)?
    };
    for r in &rows {
        println!("{}: {} trainable parameters", r.method, audit::group_thousands(r.closed_form_count));
    }
    println!();
    print!("{}", audit::table_text(&rows));
    if sites {
        for r in &rows {
            println!("\n{} per site:", r.method);
            for (site, n) in &r.per_site {
                println!("  {site:<16} {}", audit::group_thousands(*n));
            }
        }
    }
    if let Some(path) = out {
        write_text(path, &audit::table_csv(&rows))?;
    }
    Ok(())
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ablation".into());
    out.with_file_name(format!("{stem}.summary.csv"))
}

fn ablate(common: &Common, axis: Axis, seeds: u64, seed: Option<u64>, out: &Path) -> Outcome {
    if seeds == 0 {
        return Err(Failure::Invalid("--seeds must be at least 1".into()));
    }
    let cfg = load_config(common, None)?;
    print_config(&cfg);
    let corpus = load_corpus(&cfg)?;
    let first = seed.unwrap_or(cfg.train.seed);
    let seed_list: Vec<u64> = (first..first + seeds).collect();
    let grid = ablation::default_grid(axis, &cfg.adapter);
    let threads = ablation::thread_budget();
    println!(
        "ablating {} over {} configurations x {} seeds on {} threads",
        axis.name(),
        grid.len(),
        seed_list.len(),
        threads
    );
    let runs = ablation::run_ablation::<f32>(&grid, &cfg.encoder, &cfg.train, &corpus, &seed_list, threads)?;
    for r in runs.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "run {} ({}, seed {}) failed: {}",
            r.config_id,
            r.axis_value,
            r.seed,
            r.error.as_deref().unwrap_or_default()
        );
    }
    let summary = ablation::summarize(&runs);
    write_text(out, &ablation::runs_csv(&runs))?;
    let summary_out = summary_path(out);
    write_text(&summary_out, &ablation::summary_csv(&summary))?;
    println!("{:<14} {:>10} {:>10} {:>6} {:>10}", "value", "mean_eer", "stdev", "failed", "params");
    for s in &summary {
        println!(
            "{:<14} {:>10.3} {:>10.3} {:>6} {:>10}",
            s.axis_value, s.mean_eer, s.stdev_eer, s.failed, s.params
        );
    }
    println!("runs written to {}, summary to {}", out.display(), summary_out.display());
    Ok(())
}

fn run_gradcheck(all: bool, op: Option<&str>, trials: usize, seed: u64) -> Outcome {
    let cases = gradcheck::all_cases();
    let selected: Vec<_> = match (all, op) {
        (_, Some(name)) => {
            let found: Vec<_> = cases.into_iter().filter(|c| c.name == name).collect();
            if found.is_empty() {
                return Err(Failure::Invalid(format!("unknown gradcheck case `{name}`")));
            }
            found
        }
        (true, None) => cases,
        (false, None) => return Err(Failure::Invalid("pass --all or --op NAME".into())),
    };
    if trials == 0 {
        return Err(Failure::Invalid("--trials must be at least 1".into()));
    }
    println!("# gradcheck: eps {:e}, tolerance {:e}, {trials} trials, seed {seed}", gradcheck::EPS, gradcheck::TOLERANCE);
    let rng = SplitRng::new(seed);
    let mut failed = 0;
    for case in &selected {
        let report = gradcheck::run_case(case, trials, &rng)?;
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        if !report.passed() {
            failed += 1;
        }
        println!("{verdict} {:<24} max_rel_err {:.3e}", report.name, report.max_rel_err);
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} cases failed", selected.len())));
    }
    println!("all {} cases passed", selected.len());
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData { common, spec, seed, out } => gen_data(&common, spec.as_deref(), seed, &out),
        Command::Train { common, seed, out } => run_train(&common, seed, &out),
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
        } => run_eval(&common, &checkpoint, split, &out),
        Command::CountParams { common, sites, out } => count_params(&common, sites, out.as_deref()),
        Command::Ablate {
            common,
            axis,
            seeds,
            seed,
            out,
        } => ablate(&common, axis.into(), seeds, seed, &out),
        Command::Gradcheck { all, op, trials, seed } => run_gradcheck(all, op.as_deref(), trials, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
