use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn upft(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_upft"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn upft")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, n: &str, seed: &str) -> PathBuf {
    let out = dir.join(format!("synth-{n}-{seed}"));
    let o = upft(&out, &["synth", "--n", n, "--seed", seed]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("corpus.jsonl")
}

#[test]
fn deterministic_model_bounds_are_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture("deterministic_a5e.json");
    let o = upft(
        dir.path(),
        &["verify-bounds", "--model-path", model.to_str().unwrap(), "--prompt", "?", "--answer", "5", "--max-len", "3"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&dir.path().join("bounds.json"));
    assert_eq!(r["log_p_y_given_x"], 0.0);
    assert_eq!(r["jensen_bound"], 0.0);
    for t in 0..=3 {
        assert_eq!(r["prefix_bound_by_t"][t.to_string()], 0.0);
    }
    assert!(dir.path().join("provenance.json").exists());
}

#[test]
fn corrupted_report_exits_with_verification_code() {
    let dir = tempfile::tempdir().unwrap();
    let report = fixture("corrupted_bound_report.json");
    let o = upft(dir.path(), &["verify-bounds", "--check-report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(6));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("VIOLATION")).count(), 5);
}

#[test]
fn random_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = upft(dir.path(), &["verify-bounds", "--random-suite", "20", "--likelihood", "smoothed"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&dir.path().join("suite.json"));
    assert_eq!(s["n_instances"], 20);
    assert_eq!(s["failures"].as_array().unwrap().len(), 0);
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(upft(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(upft(dir.path(), &["synth", "--n", "0"]).status.code(), Some(3));
    let missing = dir.path().join("missing.jsonl");
    let o = upft(dir.path(), &["build-dataset", "--corpus", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[nonsense]\nx = 1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_upft"))
        .args(["--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "synth"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn synth_matches_golden_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let o = upft(dir.path(), &["synth", "--n", "5", "--steps", "2", "--seed", "7"]);
    assert!(o.status.success());
    let got = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    let want = std::fs::read_to_string(fixture("golden_synth_n5_s2_seed7.jsonl")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn upft_dataset_split_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "100", "3");
    let out = dir.path().join("ds");
    let o = upft(
        &out,
        &["build-dataset", "--corpus", corpus.to_str().unwrap(), "--method", "upft", "--t", "8", "--p", "0.1"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(out.join("dataset.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 100);
    assert_eq!(lines.iter().filter(|l| l["kind"] == "full").count(), 10);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["n_emitted"], 100);
    assert_eq!(manifest["partial"], false);

    let prov = read_json(&out.join("provenance.json"));
    assert_eq!(prov["subcommand"], "build-dataset");
    assert_eq!(prov["resolved"]["pipeline"]["prefix_len"], 8);

    let budget_out = dir.path().join("budget");
    let o = upft(&budget_out, &["budget", "--manifest", out.join("manifest.json").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(budget_out.join("budget.csv").exists());
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "30", "4");
    let ds = dir.path().join("ds");
    assert!(upft(&ds, &["build-dataset", "--corpus", corpus.to_str().unwrap(), "--method", "sft"]).status.success());
    let tr = dir.path().join("tr");
    let o = upft(&tr, &["train-toy", "--dataset", ds.join("dataset.jsonl").to_str().unwrap(), "--epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(tr.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 30usize.div_ceil(8));
    let ev = dir.path().join("ev");
    let o = upft(
        &ev,
        &["evaluate", "--model-path", tr.join("model.json").to_str().unwrap(), "--corpus", corpus.to_str().unwrap()],
    );
    assert!(o.status.success());
    let e = read_json(&ev.join("evaluation.json"));
    assert_eq!(e["n_questions"], 30);
}

#[test]
fn sample_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "4", "5");
    let sm = dir.path().join("sm");
    assert!(upft(&sm, &["sample", "--corpus", corpus.to_str().unwrap(), "--n", "6"]).status.success());
    let trajs = sm.join("trajectories.jsonl");
    assert_eq!(std::fs::read_to_string(&trajs).unwrap().lines().count(), 24);
    let cov = dir.path().join("cov");
    let o = upft(&cov, &["analyze-coverage", "--trajectories", trajs.to_str().unwrap(), "--t-grid", "0,1,2"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(cov.join("coverage.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
    assert!(csv.lines().skip(1).filter(|l| l.contains(",0,")).all(|l| l.contains(",0,1,6")));
}

#[test]
fn compare_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[experiment]\nn_seeds = 1\nmethods = [\"sft\", \"upft\"]\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_upft"))
            .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "compare"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("report.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
