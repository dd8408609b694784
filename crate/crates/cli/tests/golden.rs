//! Golden-file regression tests and JSON schema checks.
//!
//! Run with `HUBLESS_BLESS=1` to rewrite the committed fixtures after an
//! intentional change in numerics or output format.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn hubless<S: AsRef<str>>(args: &[S]) -> Vec<u8> {
    let args: Vec<&str> = args.iter().map(AsRef::as_ref).collect();
    let out = Command::new(env!("CARGO_BIN_EXE_hubless"))
        .args(&args)
        .env("HUBLESS_THREADS", "1")
        .output()
        .expect("spawn hubless");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn blessing() -> bool {
    std::env::var_os("HUBLESS_BLESS").is_some_and(|v| v == "1")
}

/// Compares `actual` with the committed golden file, or rewrites it when
/// blessing.
fn check_golden(golden: &Path, actual: &[u8]) {
    if blessing() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(golden, actual).unwrap();
        return;
    }
    let expected = fs::read(golden).unwrap_or_else(|e| panic!("{}: {e} (bless with HUBLESS_BLESS=1)", golden.display()));
    assert!(expected == actual, "{} differs from the golden copy", golden.display());
}

fn p(path: impl AsRef<Path>) -> String {
    path.as_ref().to_str().unwrap().to_string()
}

fn strs(args: &[&str]) -> Vec<String> {
    args.iter().map(|a| a.to_string()).collect()
}

const SMALL_DATA: &[&str] = &["--classes-seen", "6", "--classes-unseen", "3", "--dim", "16", "--semantic-dim", "20", "--per-class", "20"];
const SMALL_RUN: &[&str] = &["--epochs", "30", "--batch-size", "16", "--hidden", "24,24"];
const DATA_FILES: [&str; 6] = ["seen.fbnk", "seen.fbnk.labels", "unseen.fbnk", "unseen.fbnk.labels", "embeddings.txt", "manifest.json"];
const RUN_FILES: [&str; 3] = ["config.json", "log.csv", "weights.bin"];

fn inputs(data: &Path, bank: &str) -> Vec<String> {
    vec![
        "--features".into(),
        p(data.join(bank)),
        "--embeddings".into(),
        p(data.join("embeddings.txt")),
        "--manifest".into(),
        p(data.join("manifest.json")),
    ]
}

fn train_args(data: &Path, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args = strs(&["train", "--out"]);
    args.push(p(out));
    args.extend(inputs(data, "seen.fbnk"));
    args.extend(strs(extra));
    args
}

#[test]
fn small_fixture_regenerates_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let mut args = strs(&["synth", "--out"]);
    args.push(p(&data));
    args.extend(strs(SMALL_DATA));
    hubless(&args);
    hubless(&train_args(&data, &run, SMALL_RUN));
    for f in DATA_FILES {
        check_golden(&fixtures().join("small").join(f), &fs::read(data.join(f)).unwrap());
    }
    for f in RUN_FILES {
        check_golden(&fixtures().join("small_run").join(f), &fs::read(run.join(f)).unwrap());
    }
}

fn on_fixture(command: &str, extra: &[String]) -> Vec<u8> {
    let mut args = vec![command.to_string(), "--run".into(), p(fixtures().join("small_run"))];
    args.extend(inputs(&fixtures().join("small"), "unseen.fbnk"));
    args.extend_from_slice(extra);
    hubless(&args)
}

fn eval_fixture(extra: &[String]) -> Vec<u8> {
    on_fixture("eval", extra)
}

fn diagnose_fixture() -> Vec<u8> {
    on_fixture("diagnose", &[])
}

fn gzsl_args() -> Vec<String> {
    let mut args = strs(&["--gzsl", "--beta", "0.3", "--seen-features"]);
    args.push(p(fixtures().join("small/seen.fbnk")));
    args
}

#[test]
fn committed_run_reproduces_recorded_reports() {
    let golden = fixtures().join("golden");
    check_golden(&golden.join("eval_zsl.json"), &eval_fixture(&[]));
    check_golden(&golden.join("eval_gzsl.json"), &eval_fixture(&gzsl_args()));
    check_golden(&golden.join("diagnose.json"), &diagnose_fixture());

    // The checkpoint alone reproduces the accuracy logged at training time.
    let run = hubless_core::trainer::load_run(fixtures().join("small_run")).unwrap();
    let bank = hubless_core::dataio::load_feature_bank(fixtures().join("small/seen.fbnk")).unwrap();
    let table = hubless_core::dataio::load_embedding_table(fixtures().join("small/embeddings.txt"), false).unwrap();
    let table = hubless_core::trainer::prepare_table(&table, &run.config).unwrap();
    let protos = hubless_core::ClassPrototypes::from_table(&table, &run.seen_classes).unwrap();
    let report = hubless_core::inference::evaluate_zsl(&bank, &protos, &run.weights, run.config.direction).unwrap();
    assert_eq!(report.top1_unseen, run.log.last().unwrap().seen_top1);
}

#[test]
fn default_run_matches_golden_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    hubless(&["synth".to_string(), "--out".into(), p(&data)]);
    hubless(&train_args(&data, &run, &[]));
    let log = fs::read(run.join("log.csv")).unwrap();
    check_golden(&fixtures().join("golden/default_log.csv"), &log);

    let parsed = hubless_core::trainer::parse_log_csv(std::str::from_utf8(&log).unwrap()).unwrap();
    assert_eq!(parsed.len(), 100);
    for w in parsed[..10].windows(2) {
        assert!(w[1].l_t < w[0].l_t, "L_T rose from epoch {} to {}", w[0].epoch, w[1].epoch);
    }
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    let schema: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, output: &[u8]) {
    let value: Value = serde_json::from_slice(output).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn json_outputs_validate_against_committed_schemas() {
    let eval = schema("eval_report.schema.json");
    assert_valid(&eval, &eval_fixture(&[]));
    assert_valid(&eval, &eval_fixture(&gzsl_args()));
    assert_valid(&schema("hubness_report.schema.json"), &diagnose_fixture());

    // Queries equal to prototypes: null skewness with a reason.
    let unseen = fixtures().join("small/unseen.fbnk");
    let degenerate = hubless(&["diagnose".to_string(), "--features".into(), p(&unseen), "--prototypes".into(), p(&unseen)]);
    assert_valid(&schema("hubness_report.schema.json"), &degenerate);

    let mut args = vec!["cv".to_string()];
    args.extend(inputs(&fixtures().join("small"), "seen.fbnk"));
    args.extend(strs(&[
        "--repeats",
        "2",
        "--grid-alpha",
        "0,0.7",
        "--grid-lambda",
        "0",
        "--grid-beta",
        "0,0.3",
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--hidden",
        "24,24",
    ]));
    assert_valid(&schema("cv_report.schema.json"), &hubless(&args));

    // A wrong shape is rejected, so the schemas are not vacuous.
    let broken = br#"{"task": "zsl"}"#;
    let value: Value = serde_json::from_slice(broken).unwrap();
    assert!(!eval.is_valid(&value));
}
