use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relmem_cli::commands::{GridRow, PredictionRecord, Summary};

fn relmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relmem")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = relmem(args);
    assert!(
        out.status.success(),
        "relmem {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small corpus plus a run file that trains on it in a few seconds.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&["synth-data", "--out", p(&data), "--train", "300", "--dev", "60", "--test", "60", "--seed", "4"]);
        let cfg = "train = data/train.jsonl\ndev = data/dev.jsonl\ntest = data/test.jsonl\n\
                   seed = 2\nepochs = 3\nbatch_size = 32\nword_dim = 16\nsubword_dim = 16\n\
                   layers = 1\nhidden = 16\npad_length = 8\n";
        std::fs::write(dir.path().join("run.cfg"), cfg).unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, ck: &str, extra: &[&str]) -> Summary {
        let cfg = self.path("run.cfg");
        let ck = self.path(ck);
        let mut args = vec!["train", "--config", p(&cfg), "--checkpoint", p(&ck)];
        args.extend_from_slice(extra);
        ok(&args);
        let report = std::fs::read_to_string(format!("{}.report.jsonl", ck.display())).unwrap();
        serde_json::from_str(report.lines().last().unwrap()).unwrap()
    }
}

fn accuracy_line(text: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with("accuracy")).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(relmem(&["--help"]).status.code(), Some(0));
    assert_eq!(relmem(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(relmem(&[]).status.code(), Some(1));
}

#[test]
fn unknown_key_is_named() {
    let out = relmem(&["train", "--set", "lamda=0.3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nlamda = 0.3\n").unwrap();
    let out = relmem(&["train", "--config", p(&cfg)]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lamda") && err.contains(":2"), "{err}");
}

#[test]
fn missing_or_empty_training_data_is_refused() {
    let out = relmem(&["train", "--checkpoint", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let ck = dir.path().join("m.ckpt");
    let out = relmem(&["train", "--train", p(&empty), "--checkpoint", p(&ck)]);
    assert!(!out.status.success());
    assert!(!ck.exists());
}

#[test]
fn synth_defaults_write_three_splits_with_a_label_header() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth-data", "--out", p(dir.path())]);
    for (split, n) in [("train", 2000), ("dev", 200), ("test", 200)] {
        let text = std::fs::read_to_string(dir.path().join(format!("{split}.jsonl"))).unwrap();
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header["labels"]["relations"].as_array().unwrap().len(), 4);
        assert_eq!(lines.count(), n);
    }
}

#[test]
fn evaluation_reproduces_the_training_report() {
    let fx = Fixture::new();
    let s = fx.train("m.ckpt", &[]);
    let ck = fx.path("m.ckpt");
    let dev = accuracy_line(&ok(&["eval", "--checkpoint", p(&ck), "--data", p(&fx.path("data/dev.jsonl"))]));
    assert_eq!(Some(dev), s.dev_accuracy.map(|a| (a * 1e4).round() / 1e4));
    let train = accuracy_line(&ok(&["eval", "--checkpoint", p(&ck), "--data", p(&fx.path("data/train.jsonl"))]));
    assert_eq!(train, (s.train_accuracy * 1e4).round() / 1e4);

    // the snapshot is the epoch with the best dev accuracy
    let report = std::fs::read_to_string(fx.path("m.ckpt.report.jsonl")).unwrap();
    let best = report
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|v| v["record"] == "epoch")
        .map(|v| v["dev_accuracy"].as_f64().unwrap())
        .fold(0.0, f64::max);
    assert_eq!(s.dev_accuracy, Some(best));
}

#[test]
fn flags_and_set_and_config_are_equivalent() {
    let fx = Fixture::new();
    let a = fx.train("a.ckpt", &["--lambda", "0.5", "--attention", "biaffine"]);
    let b = fx.train("b.ckpt", &["--set", "lambda=0.5", "-s", "attention=biaffine"]);
    std::fs::write(
        fx.path("c.cfg"),
        std::fs::read_to_string(fx.path("run.cfg")).unwrap() + "lambda = 0.5\nattention = biaffine\n",
    )
    .unwrap();
    let cfg = fx.path("c.cfg");
    let ck = fx.path("c.ckpt");
    ok(&["train", "--config", p(&cfg), "--checkpoint", p(&ck)]);
    let read = |name: &str| std::fs::read(fx.path(name)).unwrap();
    assert_eq!(a, b);
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(read("a.ckpt"), read("c.ckpt"));
    // a flag beats --set, which beats the file
    let d = fx.train("d.ckpt", &["--set", "lambda=0.9", "--lambda", "0.5", "--set", "attention=biaffine"]);
    assert_eq!(a, d);
}

#[test]
fn a_fixed_seed_reproduces_the_checkpoint() {
    let fx = Fixture::new();
    fx.train("a.ckpt", &[]);
    fx.train("b.ckpt", &[]);
    assert_eq!(std::fs::read(fx.path("a.ckpt")).unwrap(), std::fs::read(fx.path("b.ckpt")).unwrap());
    fx.train("c.ckpt", &["--seed", "3"]);
    assert_ne!(std::fs::read(fx.path("a.ckpt")).unwrap(), std::fs::read(fx.path("c.ckpt")).unwrap());
}

#[test]
fn grid_has_every_cell_and_a_zero_lambda_matches_the_baseline() {
    let fx = Fixture::new();
    let cfg = fx.path("run.cfg");
    let text = ok(&["grid", "--config", p(&cfg), "--epochs", "2"]);
    let rows: Vec<GridRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.row.as_str()).collect();
    assert_eq!(names, ["baseline", "D+K", "D+V", "B+K", "B+V"]);

    let zero = ok(&["grid", "--config", p(&cfg), "--epochs", "2", "--lambda", "0", "--cells", "D+V"]);
    let zero: GridRow = serde_json::from_str(zero.trim()).unwrap();
    assert_eq!(zero.accuracy, rows[0].accuracy);
    assert_eq!(zero.dev_accuracy, rows[0].dev_accuracy);
}

#[test]
fn predict_and_inspect_list_retrieved_slots() {
    let fx = Fixture::new();
    fx.train("m.ckpt", &[]);
    let ck = fx.path("m.ckpt");
    let data = fx.path("data/test.jsonl");

    let text = ok(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "-k", "4"]);
    let records: Vec<PredictionRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 60);
    for r in &records {
        assert_eq!(r.retrieved.len(), 4);
        assert!(r.retrieved.windows(2).all(|w| w[0].weight >= w[1].weight));
        let total: f64 = r.probabilities.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    let listing = ok(&["inspect-memory", "--checkpoint", p(&ck), "--data", p(&data), "-k", "1"]);
    assert_eq!(listing.matches("query ").count(), 60);
    assert_eq!(listing.matches("   1. weight").count(), 60);
    assert!(!listing.contains("   2. weight"));

    // k beyond the memory size is clamped
    let text = ok(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "-k", "100000"]);
    let first: PredictionRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first.retrieved.len(), 300);
}

#[test]
fn inspecting_a_baseline_checkpoint_fails() {
    let fx = Fixture::new();
    fx.train("b.ckpt", &["--response", "baseline"]);
    let out = relmem(&[
        "inspect-memory",
        "--checkpoint",
        p(&fx.path("b.ckpt")),
        "--data",
        p(&fx.path("data/test.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no memory"));
}
