use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ftx_core::data::{ingest_csv, Manifest};

const SMALL: [&str; 10] = [
    "--set",
    "model.d_model=8",
    "--set",
    "model.heads=2",
    "--set",
    "model.layers=1",
    "--set",
    "data.synth.length=400",
    "--set",
    "epochs=2",
];

fn ftx(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftx"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FTX_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = ftx(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn default_synth_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "s"], dir.path());
    let text = fs::read_to_string(dir.path().join("s/synth.csv")).unwrap();
    assert_eq!(text.lines().count(), 4321);

    let manifest = Manifest::read(&dir.path().join("s/manifest.json")).unwrap();
    let (series, report) = ingest_csv(&manifest.csv_path, &manifest.schema()).unwrap();
    assert_eq!(series.len(), 4320);
    assert!(report.rejected.is_empty());
    assert_eq!(report.gap_rows, 0);

    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s/ground_truth.json")).unwrap()).unwrap();
    assert_eq!(truth["periods"], serde_json::json!([24.0, 168.0]));
}

#[test]
fn training_is_reproducible_and_overrides_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"model": {"mask_prob": 0.2}, "train": {"epochs": 3}}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(&with_small(&["train", "--config", cfg, "--set", "p=0.5", "--out", "a"]), dir.path());
    ok(&with_small(&["train", "--config", cfg, "--set", "p=0.5", "--out", "b"]), dir.path());

    let a = fs::read(dir.path().join("a/model.ckpt")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/model.ckpt")).unwrap());
    let log = fs::read_to_string(dir.path().join("a/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["mask_prob"], 0.5);
    assert_eq!(resolved["train"]["epochs"], 2);

    ok(&with_small(&["train", "--config", cfg, "--seed", "7", "--out", "c"]), dir.path());
    assert_ne!(a, fs::read(dir.path().join("c/model.ckpt")).unwrap());

    let rerun = dir.path().join("a/resolved_config.json");
    ok(&["train", "--config", rerun.to_str().unwrap(), "--out", "d"], dir.path());
    assert_eq!(a, fs::read(dir.path().join("d/model.ckpt")).unwrap());
}

#[test]
fn eval_writes_reports_predictions_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    ok(&with_small(&["train", "--out", "t"]), dir.path());
    ok(&["eval", "--checkpoint", "t/model.ckpt", "--plot", "--out", "e"], dir.path());
    ok(&["eval", "--checkpoint", "t/model.ckpt", "--split", "train", "--out", "e"], dir.path());

    let e = dir.path().join("e");
    let preds = fs::read_to_string(e.join("predictions_test.csv")).unwrap();
    let report = fs::read_to_string(e.join("report_test.csv")).unwrap();
    let n_test: usize = report.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(preds.lines().count() - 1, n_test);
    assert!(e.join("report_train.csv").exists() && e.join("predictions_train.csv").exists());
    assert!(e.join("report_test.txt").exists());
    assert!(fs::read_to_string(e.join("predictions_test.svg")).unwrap().starts_with("<svg"));
    assert!(!e.join("predictions_train.svg").exists());
}

#[test]
fn eval_rejects_a_dataset_with_other_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    ok(&with_small(&["train", "--out", "t"]), dir.path());
    ok(&["synth", "--set", "data.synth.length=400", "--out", "s"], dir.path());
    let manifest = r#"{"csv_path": "synth.csv", "timestamp_col": "timestamp",
        "endo_cols": ["co2_mass"], "exo_cols": ["driver_lead"]}"#;
    fs::write(dir.path().join("s/one_exo.json"), manifest).unwrap();
    let out = ftx(
        &[
            "eval",
            "--checkpoint",
            "t/model.ckpt",
            "--set",
            "data.synth=null",
            "--set",
            "data.manifest=\"s/one_exo.json\"",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exogenous"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_small(&["train", "--out", "x"]);
    args.extend(["--set", "model.heads=3"]);
    let bad = ftx(&args, dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("model.heads"));

    let unknown = ftx(&["train", "--set", "model.widht=3"], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("widht"));

    assert_eq!(ftx(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(ftx(&["train", "--config", "missing.json"], dir.path()).status.code(), Some(2));

    let diverged = ftx(&with_small(&["train", "--set", "lr=1e300", "--out", "x"]), dir.path());
    assert_eq!(diverged.status.code(), Some(3), "{}", String::from_utf8_lossy(&diverged.stderr));
}

#[test]
fn ablation_table_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_small(&["ablate", "--seeds", "1", "--set", "epochs=1", "--out", "g"]);
    let first = ok(&args, dir.path());
    let table = String::from_utf8_lossy(&first.stdout).to_string();
    let labels: Vec<&str> = table.lines().skip(2).map(|l| l.split("  ").next().unwrap().trim()).collect();
    assert_eq!(
        labels,
        ["Baseline", "Masking 10%", "Masking 20%", "Masking 30%", "Masking 40%", "Masking 50%", "FTimeXer"]
    );
    let cells = dir.path().join("g/cells");
    assert_eq!(fs::read_dir(&cells).unwrap().count(), 7);
    let csv = fs::read_to_string(dir.path().join("g/ablation.csv")).unwrap();

    fs::remove_file(cells.join("masking-30-seed1.json")).unwrap();
    fs::remove_file(cells.join("ftimexer-seed1.json")).unwrap();
    let second = ok(&args, dir.path());
    assert!(String::from_utf8_lossy(&second.stderr).contains("5 of 7 runs restored"));
    assert_eq!(csv, fs::read_to_string(dir.path().join("g/ablation.csv")).unwrap());
}

#[test]
fn out_dir_defaults_to_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ftx"))
        .args(["synth", "--set", "data.synth.length=300"])
        .current_dir(dir.path())
        .env("FTX_OUT_DIR", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("root/synth/synth.csv").exists());
    assert!(dir.path().join("root/synth/resolved_config.json").exists());
}

#[test]
fn robustness_writes_paired_curves() {
    let dir = tempfile::tempdir().unwrap();
    ok(&with_small(&["robustness", "--plot", "--set", "epochs=1", "--out", "r"]), dir.path());
    let r = dir.path().join("r");
    let gaps = fs::read_to_string(r.join("gaps.csv")).unwrap();
    assert_eq!(gaps.lines().count(), 1 + 6 * 3);
    assert!(gaps.lines().nth(1).unwrap().starts_with("0,0,0,0,0"));
    for f in ["curve_robust.csv", "curve_plain.csv", "robustness.svg", "model_robust.ckpt", "resolved_config.json"] {
        assert!(r.join(f).exists(), "{f}");
    }
}
