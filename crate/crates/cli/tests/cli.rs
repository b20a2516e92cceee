use std::path::Path;
use std::process::{Command, Output};

fn adaptlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptlab"))
        .args(args)
        .current_dir(dir)
        .env("ADAPTLAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
[encoder]
num_layers = 1
model_dim = 8
inner_dim = 16
num_heads = 2
input_dim = 4
max_seq_len = 32

[adapter]
kernels = [3, 5]
bottleneck = 4
rank = 2
prompt_tokens = 2

[train]
epochs = 2
batch_size = 8

[data]
corpus = "corpus.spfb"
num_records = 40
frames = 24
features = 4
burst_count_min = 2
burst_count_max = 4
"#;

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TINY).unwrap();
    let o = adaptlab(&["gen-data", "--config", "exp.toml", "--out", "corpus.spfb"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn count_params_xlsr_multiconv() {
    let dir = tempfile::tempdir().unwrap();
    let o = adaptlab(&["count-params", "--preset", "xlsr", "--method", "multiconv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("3,168,768"), "{out}");
    assert!(out.contains("3.17M"), "{out}");
    assert!(out.contains("# resolved config"));
}

#[test]
fn count_params_full_table_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = adaptlab(&["count-params", "--preset", "xlsr", "--out", "t.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "method,exact_count,reference_M,rel_dev");
    assert!(lines.iter().any(|l| l.starts_with("LoRA,3145728,3.15,")));
    assert!(lines.iter().any(|l| l.starts_with("Fixed backbone,0,0.00,")));
    assert!(!csv.contains('\r'));
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = adaptlab(&["train", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_flag_print_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["train", "--bogus"][..], &[][..]] {
        let o = adaptlab(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    }
    let o = adaptlab(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = adaptlab(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    let o = adaptlab(&["count-params", "--method", "dora"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corrupt_corpus_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TINY).unwrap();
    std::fs::write(dir.path().join("corpus.spfb"), b"XXXX").unwrap();
    let o = adaptlab(&["train", "--config", "exp.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("magic") || stderr(&o).contains("truncated"), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_the_exact_size() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TINY).unwrap();
    let o = adaptlab(&["gen-data", "--spec", "exp.toml", "--seed", "4", "--out", "c.spfb"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let len = std::fs::metadata(dir.path().join("c.spfb")).unwrap().len();
    assert_eq!(len, 18 + 40 * (6 + 24 * 4 * 4));
    assert!(stdout(&o).contains("seed = 4"));
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = tiny_dir();
    let p = dir.path();
    for out in ["a", "b"] {
        let o = adaptlab(&["train", "--config", "exp.toml", "--seed", "3", "--out", out], p);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("[train]"));
    }
    for f in ["train_log.csv", "dev_scores.csv", "checkpoint.adlb", "config.toml"] {
        let a = std::fs::read(p.join("a").join(f)).unwrap();
        let b = std::fs::read(p.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let log = std::fs::read_to_string(p.join("a/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,dev_eer\n"));
    assert_eq!(log.lines().count(), 3);

    let o = adaptlab(&["eval", "--config", "exp.toml", "--checkpoint", "a/checkpoint.adlb", "--out", "s.csv"], p);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("eer_percent"));
    // evaluating the saved checkpoint reproduces the dev scores written by train
    assert_eq!(
        std::fs::read(p.join("s.csv")).unwrap(),
        std::fs::read(p.join("a/dev_scores.csv")).unwrap()
    );

    let o = adaptlab(&["eval", "--config", "exp.toml", "--method", "houlsby", "--checkpoint", "a/checkpoint.adlb"], p);
    assert_eq!(o.status.code(), Some(1), "checkpoint/config mismatch: {}", stderr(&o));
}

#[test]
fn resolved_config_reparses() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = adaptlab(&["train", "--config", "exp.toml", "--out", "r"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = adaptlab(&["train", "--config", "r/config.toml", "--out", "r2"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(p.join("r/train_log.csv")).unwrap(),
        std::fs::read(p.join("r2/train_log.csv")).unwrap()
    );
}

#[test]
fn ablate_writes_runs_and_summary() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = adaptlab(&["ablate", "--config", "exp.toml", "--axis", "kernels", "--seeds", "2", "--out", "k.csv"], p);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let runs = std::fs::read_to_string(p.join("k.csv")).unwrap();
    assert!(runs.starts_with("config_id,axis_value,seed,eer,params\n"));
    assert_eq!(runs.lines().count(), 11);
    let summary = std::fs::read_to_string(p.join("k.summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    assert!(summary.lines().nth(1).unwrap().starts_with("0,none,"));
}

#[test]
fn gradcheck_single_case_and_unknown_case() {
    let dir = tempfile::tempdir().unwrap();
    let o = adaptlab(&["gradcheck", "--op", "matmul", "--trials", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS matmul"));
    let o = adaptlab(&["gradcheck", "--op", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = adaptlab(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_all_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = adaptlab(&["gradcheck", "--all"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(!out.contains("FAIL"));
    assert!(out.contains("PASS multiconv_mixup"));
}
