//! Command-line contracts: files written, exit codes and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn stpca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stpca"))
        .env("STPCA_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = stpca(args);
    assert!(
        out.status.success(),
        "stpca {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        ok(&[
            "synth", "--nodes", "8", "--roles", "2", "--days", "10", "--steps-per-day", "24", "--seed", "1",
            "--out", p(&f.path("data")),
        ]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, strategy: &str, extra: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(
            &path,
            format!(
                "data.path = {}\ndata.shifted = {}\nmodel.l1 = 4\nmodel.l2 = 4\nmodel.hidden_dim = 8\n\
                 embedding.strategy = {strategy}\nembedding.k = 2\ntrain.max_epochs = 2\ntrain.patience = 2\n{extra}",
                p(&self.path("data/train.csv")),
                p(&self.path("data/shifted.csv")),
            ),
        )
        .unwrap();
        path
    }

    fn train(&self, strategy: &str, out: &str) -> PathBuf {
        let cfg = self.config(&format!("{out}.conf"), strategy, "");
        let dir = self.path(out);
        ok(&["train", "--config", p(&cfg), "--out", p(&dir)]);
        dir
    }
}

#[test]
fn synth_writes_three_files_deterministically() {
    let f = Fixture::new();
    for name in ["train.csv", "shifted.csv", "roles.csv"] {
        assert!(f.path("data").join(name).is_file(), "{name}");
    }
    ok(&[
        "synth", "--nodes", "8", "--roles", "2", "--days", "10", "--steps-per-day", "24", "--seed", "1",
        "--out", p(&f.path("again")),
    ]);
    for name in ["train.csv", "shifted.csv", "roles.csv"] {
        assert_eq!(fs::read(f.path("data").join(name)).unwrap(), fs::read(f.path("again").join(name)).unwrap());
    }
}

#[test]
fn synth_rejects_shift_fraction_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let out = stpca(&["synth", "--shift-fraction", "1.5", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let f = Fixture::new();
    let a = f.train("pca", "a");
    let b = f.train("pca", "b");
    for name in ["model.stpf", "proj.stpj", "train_log.csv", "config.resolved", "test_report.json"] {
        assert!(a.join(name).is_file(), "{name}");
    }
    assert_eq!(fs::read(a.join("model.stpf")).unwrap(), fs::read(b.join("model.stpf")).unwrap());
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_mae\n"));
    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    assert!(resolved.contains("model.steps_per_day = 24\n"));
    assert!(resolved.contains("embedding.strategy = pca\n"));
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let f = Fixture::new();
    let cfg = f.config("bad.conf", "adaptive", "model.widht = 3\n");
    let out = stpca(&["train", "--config", p(&cfg), "--out", p(&f.path("bad"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.widht"));
    let out = stpca(&["train", "--config", p(&cfg), "--set", "model.hidden_dim=0", "--out", p(&f.path("bad"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_strategies_and_missing_checkpoint() {
    let f = Fixture::new();
    let run = f.train("adaptive", "ad");
    let data = f.path("data/train.csv");
    let model = run.join("model.stpf");
    let vanilla = run.join("vanilla.json");
    let zero = run.join("zero.json");
    ok(&["eval", "--model", p(&model), "--data", p(&data), "--out", p(&vanilla)]);
    ok(&["eval", "--model", p(&model), "--data", p(&data), "--strategy", "zero", "--out", p(&zero)]);
    let v = fs::read_to_string(&vanilla).unwrap();
    let z = fs::read_to_string(&zero).unwrap();
    assert_ne!(v, z);
    let out = stpca(&["eval", "--model", p(&run.join("missing.stpf")), "--data", p(&data), "--out", p(&zero)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_matches_training_report_on_the_test_split() {
    let f = Fixture::new();
    let run = f.train("pca", "pca");
    let out = run.join("eval.json");
    ok(&["eval", "--model", p(&run.join("model.stpf")), "--data", p(&f.path("data/train.csv")), "--out", p(&out)]);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let train: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("test_report.json")).unwrap()).unwrap();
    assert_eq!(eval["horizons"], train["horizons"]);
    assert_eq!(eval["model_id"], train["model_id"]);
}

#[test]
fn transfer_runs_every_listed_strategy() {
    let f = Fixture::new();
    let run = f.train("pca", "pca");
    let out = run.join("cmp.json");
    let csv = run.join("cmp.csv");
    ok(&[
        "transfer", "--model", p(&run.join("model.stpf")), "--proj", p(&run.join("proj.stpj")),
        "--target", p(&f.path("data/shifted.csv")), "--strategies", "vanilla,zero,pca,finetune",
        "--adaptation-fraction", "0.2", "--finetune-epochs", "2", "--refit-projection",
        "--out", p(&out), "--csv", p(&csv),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let arr = v.as_array().unwrap();
    let names: Vec<&str> = arr.iter().map(|e| e["strategy"].as_str().unwrap()).collect();
    assert_eq!(names, ["vanilla", "zero", "pca", "finetune"]);
    assert_eq!(arr[2]["report"]["metadata"]["refit_projection"], "true");
    assert!(fs::read_to_string(&csv).unwrap().starts_with("strategy,horizon,mae,rmse,mape\n"));
    let text = ok(&["report", p(&out)]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("finetune"));
}

#[test]
fn cross_city_with_other_steps_per_day_exits_1_naming_both() {
    let f = Fixture::new();
    let run = f.train("pca", "pca");
    let city = f.path("city");
    ok(&["synth", "--nodes", "5", "--roles", "2", "--days", "6", "--steps-per-day", "12", "--out", p(&city)]);
    let out = stpca(&[
        "transfer", "--model", p(&run.join("model.stpf")), "--proj", p(&run.join("proj.stpj")),
        "--target", p(&city.join("train.csv")), "--strategies", "pca", "--out", p(&f.path("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("12") && err.contains("24"), "{err}");
}

#[test]
fn unknown_strategy_is_a_usage_error() {
    let out = stpca(&["transfer", "--model", "m", "--target", "t", "--out", "o", "--strategies", "best"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_emits_one_row_per_k_and_the_baseline() {
    let f = Fixture::new();
    let cfg = f.config("sweep.conf", "pca", "");
    let out = f.path("sweep");
    ok(&["sweep-components", "--config", p(&cfg), "--k", "1..3", "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,val_mae,test_mae,shifted_mae");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("adaptive,"));
    assert!(lines.iter().skip(1).all(|l| l.split(',').nth(3).is_some_and(|c| !c.is_empty())));
}

#[test]
fn export_embeddings_and_graph() {
    let f = Fixture::new();
    let run = f.train("pca", "pca");
    let emb = run.join("emb.csv");
    let graph = run.join("graph.csv");
    ok(&[
        "export-embeddings", "--model", p(&run.join("model.stpf")), "--data", p(&f.path("data/shifted.csv")),
        "--proj", p(&run.join("proj.stpj")), "--graph", p(&graph), "--out", p(&emb),
    ]);
    let emb = fs::read_to_string(&emb).unwrap();
    assert!(emb.starts_with("node_id,c0,c1\ns000,"));
    assert_eq!(emb.lines().count(), 9);
    let graph = fs::read_to_string(&graph).unwrap();
    assert_eq!(graph.lines().count(), 1 + 64);
}

#[test]
fn ingest_summarizes() {
    let f = Fixture::new();
    let out = ok(&["ingest", p(&f.path("data/train.csv"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["nodes"], 8);
    assert_eq!(v["steps_per_day"], 24);
    assert_eq!(v["steps"], 240);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_stpca"))
        .env("STPCA_THREADS", "lots")
        .args(["ingest", "x.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
