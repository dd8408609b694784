use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn hubless(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hubless"))
        .args(args)
        .env("HUBLESS_THREADS", "1")
        .output()
        .expect("spawn hubless")
}

fn ok(args: &[&str]) -> Output {
    let out = hubless(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--classes-seen",
    "6",
    "--classes-unseen",
    "3",
    "--dim",
    "16",
    "--semantic-dim",
    "20",
    "--per-class",
    "20",
];

const FAST: &[&str] = &["--epochs", "4", "--batch-size", "16", "--hidden", "24,24"];

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["synth", "--out", s(&data)];
    args.extend_from_slice(SMALL);
    ok(&args);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let files = inputs(data, "seen.fbnk");
    let mut args = vec![
        "train",
        "--features",
        &files[0],
        "--embeddings",
        &files[1],
        "--manifest",
        &files[2],
        "--out",
        s(out),
    ];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    hubless(&args)
}

fn inputs(data: &Path, bank: &str) -> [String; 3] {
    [bank, "embeddings.txt", "manifest.json"].map(|f| data.join(f).to_str().unwrap().to_string())
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn synth_writes_loadable_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path());
    let b = dir.path().join("again");
    let mut args = vec!["synth", "--out", s(&b)];
    args.extend_from_slice(SMALL);
    ok(&args);
    for f in ["seen.fbnk", "seen.fbnk.labels", "unseen.fbnk", "unseen.fbnk.labels", "embeddings.txt", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let bank = hubless_core::dataio::load_feature_bank(a.join("seen.fbnk")).unwrap();
    assert_eq!(bank.len(), 120);
    let manifest = hubless_core::dataio::load_manifest(a.join("manifest.json")).unwrap();
    assert_eq!(manifest.unseen.len(), 3);
}

#[test]
fn synth_rejects_single_seen_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = hubless(&["synth", "--out", s(dir.path()), "--classes-seen", "1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn train_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&data, &a, &[]).status.success());
    assert!(train(&data, &b, &[]).status.success());
    for f in ["log.csv", "weights.bin", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,L_S,L_U,L_T,hist_gap,seen_top1,skew_j1\n"));
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn alpha_zero_logs_zero_skewness_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run");
    assert!(train(&data, &run, &["--alpha", "0"]).status.success());
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    for line in log.lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some("0"), "{line}");
    }
}

#[test]
fn missing_features_is_usage_error() {
    let out = hubless(&["train", "--embeddings", "e.txt", "--manifest", "m.json", "--out", "r"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unreadable_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    fs::write(data.join("broken.fbnk"), b"not a bank").unwrap();
    fs::write(data.join("broken.fbnk.labels"), b"x\n").unwrap();
    let out = hubless(&[
        "train",
        "--features",
        s(&data.join("broken.fbnk")),
        "--embeddings",
        s(&data.join("embeddings.txt")),
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 2);
    let out = hubless(&["eval", "--run", s(&dir.path().join("nope")), "--features", "x", "--embeddings", "y", "--manifest", "z"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn invalid_hyperparameter_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = train(&data, &dir.path().join("run"), &["--tau", "0"]);
    assert_eq!(code(&out), 1);
}

fn eval_json(data: &Path, run: &Path, extra: &[&str]) -> Value {
    let files = inputs(data, "unseen.fbnk");
    let mut args = vec![
        "eval",
        "--run",
        s(run),
        "--features",
        &files[0],
        "--embeddings",
        &files[1],
        "--manifest",
        &files[2],
    ];
    args.extend_from_slice(extra);
    serde_json::from_slice(&ok(&args).stdout).unwrap()
}

#[test]
fn eval_reports_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run");
    assert!(train(&data, &run, &[]).status.success());

    let zsl = eval_json(&data, &run, &[]);
    assert_eq!(zsl["task"], "zsl");
    assert!(zsl["top1_unseen"].as_f64().unwrap() >= 0.0);
    assert_eq!(zsl["config_echo"]["epochs"], 4);

    let seen = data.join("seen.fbnk");
    let gzsl = eval_json(&data, &run, &["--gzsl", "--beta", "0.3", "--seen-features", s(&seen)]);
    let (su, un) = (gzsl["top1_seen"].as_f64().unwrap(), gzsl["top1_unseen"].as_f64().unwrap());
    let hm = if su + un > 0.0 { 2.0 * su * un / (su + un) } else { 0.0 };
    assert_eq!(gzsl["harmonic_mean"].as_f64().unwrap(), hm);
    assert_eq!(gzsl["beta"], 0.3);

    // beta 0: plain argmax over all nine classes.
    let zero = eval_json(&data, &run, &["--gzsl", "--beta", "0", "--seen-features", s(&seen)]);
    let run_files = hubless_core::trainer::load_run(&run).unwrap();
    let table = hubless_core::trainer::prepare_table(
        &hubless_core::dataio::load_embedding_table(data.join("embeddings.txt"), false).unwrap(),
        &run_files.config,
    )
    .unwrap();
    let manifest = hubless_core::dataio::load_manifest(data.join("manifest.json")).unwrap();
    let all = hubless_core::ClassPrototypes::from_table(&table, &manifest.all_classes()).unwrap();
    let unseen_bank = hubless_core::dataio::load_feature_bank(data.join("unseen.fbnk")).unwrap();
    let union = hubless_core::inference::evaluate_zsl(&unseen_bank, &all, &run_files.weights, run_files.config.direction).unwrap();
    assert_eq!(zero["top1_unseen"].as_f64().unwrap(), union.top1_unseen);
}

#[test]
fn diagnose_reports_hubness() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let unseen = data.join("unseen.fbnk");

    // Queries equal to prototypes.
    let out = ok(&["diagnose", "--features", s(&unseen), "--prototypes", s(&unseen), "--j", "1"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["counts"].as_array().unwrap().iter().all(|c| c == 1));
    assert!(report["skewness"].is_null());
    assert!(report["skewness_null_reason"].as_str().unwrap().contains("variance"));

    let out = hubless(&["diagnose", "--features", s(&unseen), "--prototypes", s(&unseen), "--j", "1000"]);
    assert_eq!(code(&out), 1);

    let run = dir.path().join("run");
    assert!(train(&data, &run, &[]).status.success());
    let out = ok(&[
        "diagnose",
        "--features",
        s(&unseen),
        "--run",
        s(&run),
        "--embeddings",
        s(&data.join("embeddings.txt")),
        "--manifest",
        s(&data.join("manifest.json")),
        "--j",
        "2",
        "--metric",
        "l2",
    ]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let counts: u64 = report["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 2 * 60);
    assert_eq!(report["metric"], "l2");

    let out = hubless(&[
        "diagnose",
        "--features",
        s(&unseen),
        "--run",
        s(&run),
        "--embeddings",
        s(&data.join("embeddings.txt")),
        "--manifest",
        s(&data.join("manifest.json")),
        "--direction",
        "feat2sem",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn cv_singleton_grids_echo() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let files = inputs(&data, "seen.fbnk");
    let mut args = vec![
        "cv",
        "--features",
        &files[0],
        "--embeddings",
        &files[1],
        "--manifest",
        &files[2],
        "--repeats",
        "2",
        "--grid-alpha",
        "0.4",
        "--grid-lambda",
        "0.001",
        "--grid-beta",
        "0.2",
    ];
    args.extend_from_slice(FAST);
    let a = ok(&args).stdout;
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["selected"]["alpha"], 0.4);
    assert_eq!(report["selected"]["lambda"], 0.001);
    assert_eq!(report["selected"]["beta"], 0.2);
    assert_eq!(report["repeats"].as_array().unwrap().len(), 2);
    assert_eq!(ok(&args).stdout, a);
}

#[test]
fn inputs_are_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let before: Vec<Vec<u8>> = ["seen.fbnk", "embeddings.txt", "manifest.json"]
        .iter()
        .map(|f| fs::read(data.join(f)).unwrap())
        .collect();
    assert!(train(&data, &dir.path().join("run"), &["--normalize", "both"]).status.success());
    for (f, b) in ["seen.fbnk", "embeddings.txt", "manifest.json"].iter().zip(&before) {
        assert_eq!(&fs::read(data.join(f)).unwrap(), b);
    }
}
