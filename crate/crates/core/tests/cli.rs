use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gim")).args(args).output().expect("spawn gim")
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_at_head() {
    let out = gim(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gru_step") && stdout.contains("isolation"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn negative_count_is_a_validation_error_naming_the_key() {
    let out = gim(&["train", "--set", "contrastive.n_negatives=-1"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["key"], "contrastive.n_negatives");
    assert_eq!(e["exit_code"], 1);
}

#[test]
fn unknown_config_key_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# run\nseed = 3\nmodel.depth = 4\n").unwrap();
    let out = gim(&["train", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["key"], "model.depth");
    assert_eq!(e["line"], 3);
}

#[test]
fn bad_arguments_and_missing_runs() {
    let out = gim(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "argument");

    let dir = tempfile::tempdir().unwrap();
    let out = gim(&["probe", "--run", path(&dir.path().join("nope"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["exit_code"], 2);
}

#[test]
fn synth_train_cache_probe_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.gimd");
    let small = ["--set", "data.n_items=96", "--set", "data.test_items=32", "--set", "schedule.epochs=3", "--set", "contrastive.delays=1..2", "--set", "probe.epochs=3"];

    let mut args = vec!["synth", "--out", path(&data)];
    args.extend(small);
    assert_eq!(gim(&args).status.code(), Some(0));
    let ds = gim::data::read_dataset(&data).unwrap();
    assert_eq!(ds.len(), 128);

    let runs = dir.path().join("runs");
    for mode in ["simultaneous", "cached"] {
        let out_dir = runs.join(mode);
        let mut args = vec!["train", "--schedule", mode, "--out", path(&out_dir)];
        args.extend(small);
        let out = gim(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(gim(&["probe", "--run", path(&out_dir)]).status.code(), Some(0));
    }

    let store = dir.path().join("m0.gima");
    let out = gim(&["cache", "--run", path(&runs.join("cached")), "--module", "0", "--out", path(&store)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(gim::store::ActivationCacheStore::read(&store).unwrap().len(), 96);

    let report_file = dir.path().join("report.json");
    let out = gim(&["report", path(&runs), "--out", path(&report_file)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    for m in ["0", "1", "2"] {
        assert_eq!(table.lines().filter(|l| l.starts_with(&format!("{m} "))).count(), 2, "{table}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_file).unwrap()).unwrap();
    assert_eq!(report["modules"].as_array().unwrap().len(), 3);
    let peak = &report["peak_bytes"];
    assert!(peak["cached"].as_u64().unwrap() < peak["simultaneous"].as_u64().unwrap());
}
