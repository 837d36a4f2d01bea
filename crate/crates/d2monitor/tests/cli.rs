//! End-to-end checks of the `d2m` binary: exit codes, artifacts, manifests,
//! and full-pipeline determinism.

use std::path::Path;
use std::process::{Command, Output};

fn d2m(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2m"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = d2m(args, dir);
    assert!(
        out.status.success(),
        "d2m {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn synth_smoke_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["synth", "--out", "d.d2t", "--samples", "100", "--steps", "16", "--dim", "32", "--seed", "7"],
        dir.path(),
    );
    assert!(dir.path().join("d.d2t").exists());
    let manifest: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("d.d2t.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seeds"][0], 7);
    assert!(manifest["outputs"][0]["sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn train_on_missing_data_exits_2_without_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = d2m(
        &["train", "--probe", "lp", "--readout", "mv", "--data", "missing.d2t", "--out", "p.d2p"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("p.d2p").exists());
}

#[test]
fn usage_error_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = d2m(&["synth", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = d2m(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flops_table_prints_known_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["flops", "--steps", "32", "--dim", "4096"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("arch,readout,params,mflops"));
    let lp_mv = text
        .lines()
        .find(|l| l.starts_with("lp,majority_vote"))
        .expect("lp majority-vote row");
    let fields: Vec<&str> = lp_mv.split(',').collect();
    assert_eq!(fields[2], "4097");
    let mflops: f64 = fields[3].parse().unwrap();
    assert!((mflops - 0.262144).abs() < 1e-6);
}

fn run_pipeline(dir: &Path, threads: &str) -> (Vec<u8>, Vec<u8>) {
    let t = &["--threads", threads][..];
    ok(
        &[&["synth", "--out", "train.d2t", "--samples", "600", "--steps", "8", "--dim", "16", "--seed", "3"], t].concat(),
        dir,
    );
    ok(
        &[&["synth", "--out", "val.d2t", "--samples", "150", "--steps", "8", "--dim", "16", "--seed", "3", "--offset", "600"], t].concat(),
        dir,
    );
    ok(
        &[&["synth", "--out", "test.d2t", "--samples", "150", "--steps", "8", "--dim", "16", "--seed", "3", "--offset", "750"], t].concat(),
        dir,
    );
    ok(
        &[&["oof", "--data", "train.d2t", "--folds", "3", "--seed", "3", "--out", "margins.csv"], t].concat(),
        dir,
    );
    ok(
        &[&["analyze", "--margins", "margins.csv", "--max-lag", "4", "--out-prefix", "dyn"], t].concat(),
        dir,
    );
    ok(
        &[&[
            "cascade-train",
            "--data",
            "train.d2t",
            "--expert",
            "mlp",
            "--folds",
            "3",
            "--target-ratio",
            "0.5",
            "--seed",
            "3",
            "--out",
            "bundle",
            "--epochs",
            "60",
            "--batch-size",
            "64",
            "--dropout",
            "0.1",
        ], t].concat(),
        dir,
    );
    ok(
        &[&["select-lambda", "--bundle", "bundle", "--val", "val.d2t"], t].concat(),
        dir,
    );
    ok(
        &[&[
            "eval",
            "--data",
            "test.d2t",
            "--bundle",
            "bundle",
            "--report",
            "report.json",
            "--records",
            "records.csv",
        ], t].concat(),
        dir,
    );
    (
        std::fs::read(dir.join("report.json")).unwrap(),
        std::fs::read(dir.join("records.csv")).unwrap(),
    )
}

#[test]
fn full_pipeline_reproduces_identically() {
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let dir3 = tempfile::tempdir().unwrap();
    let (report1, records1) = run_pipeline(dir1.path(), "2");
    let (report2, records2) = run_pipeline(dir2.path(), "2");
    assert_eq!(report1, report2, "same seeds must reproduce the report byte-for-byte");
    assert_eq!(records1, records2);
    // thread count must not matter
    let (report3, records3) = run_pipeline(dir3.path(), "1");
    assert_eq!(report1, report3);
    assert_eq!(records1, records3);

    // the artifacts look right
    let report: serde_json::Value = serde_json::from_slice(&report1).unwrap();
    for key in [
        "accuracy",
        "f1_macro",
        "f2_pos",
        "precision_pos",
        "recall_pos",
        "frr",
        "routed_fraction",
        "expected_params",
        "expected_mflops",
    ] {
        assert!(report.get(key).is_some(), "report key {key}");
    }
    let records = String::from_utf8(records1).unwrap();
    assert!(records
        .starts_with("sample_id,n_tau,routed,window_lo,window_hi,base_label,final_label"));
    for artifact in ["dyn.crossing.csv", "dyn.persistence.csv"] {
        assert!(dir1.path().join(artifact).exists(), "{artifact}");
    }
    // manifests accompany every artifact
    for manifest in [
        "train.d2t.manifest.json",
        "margins.csv.manifest.json",
        "dyn.crossing.csv.manifest.json",
        "bundle/manifest.json",
        "bundle/cascade.json.manifest.json",
        "report.json.manifest.json",
    ] {
        assert!(dir1.path().join(manifest).exists(), "{manifest}");
    }
}

#[test]
fn probe_train_eval_and_bench_flow() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["synth", "--out", "train.d2t", "--samples", "300", "--steps", "6", "--dim", "12", "--seed", "11"],
        dir.path(),
    );
    ok(
        &["synth", "--out", "test.d2t", "--samples", "100", "--steps", "6", "--dim", "12", "--seed", "11", "--offset", "300"],
        dir.path(),
    );
    ok(
        &[
            "train", "--data", "train.d2t", "--probe", "mlp", "--readout", "mean",
            "--out", "mlp.d2p", "--seed", "1", "--lr", "1e-3", "--epochs", "80",
            "--batch-size", "64", "--dropout", "0.1",
        ],
        dir.path(),
    );
    let out = ok(
        &["eval", "--data", "test.d2t", "--probe", "mlp.d2p", "--report", "probe_report.json"],
        dir.path(),
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"accuracy\""));
    let report: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("probe_report.json")).unwrap(),
    )
    .unwrap();
    assert!(report.get("routed_fraction").is_none(), "probe eval has no routing");
    assert_eq!(report["expected_params"], 3585.0); // 256*12 + 256 + 256 + 1

    let out = ok(
        &["bench", "--data", "test.d2t", "--probe", "mlp.d2p", "--repeat", "2"],
        dir.path(),
    );
    let bench: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(bench["best_ms"].as_f64().unwrap() >= 0.0);
    assert_eq!(bench["samples"], 100);
}

#[test]
fn grid_search_cli_records_points() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["synth", "--out", "d.d2t", "--samples", "200", "--steps", "4", "--dim", "8", "--seed", "21"],
        dir.path(),
    );
    ok(
        &["train", "--data", "d.d2t", "--probe", "lp", "--readout", "mean", "--out", "lp.d2p", "--seed", "2", "--grid"],
        dir.path(),
    );
    let manifest: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("lp.d2p.manifest.json")).unwrap(),
    )
    .unwrap();
    let points = manifest["config"]["grid_points"].as_array().unwrap();
    assert_eq!(points.len(), 16, "default linear-probe grid is 4 lrs x 4 decays");
    assert!(manifest["config"]["selected"]["lr"].as_f64().unwrap() > 0.0);
}
