use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ftx_core::config::RunConfig;
use ftx_core::data::{write_csv, Manifest, Prepared, SynthSpec, TIMESTAMP_FORMAT};
use ftx_core::eval::{
    ablation_csv, config_hash, curve_csv, default_grid, degradation_gaps, eval_csv, evaluate, metrics_table,
    predictions_csv, robustness_eval, run_ablation_grid, write_text, AblationTags, CurvePoint, EvalReport,
};
use ftx_core::model::RobustObjective;
use ftx_core::train::fit_with;
use ftx_core::{Checkpoint, Error, FTimeXer, ModelConfig, Result};
use serde_json::json;

use crate::plot::{line_chart, Line};
use crate::{Common, Split};

pub const CHECKPOINT: &str = "model.ckpt";
pub const RESOLVED: &str = "resolved_config.json";

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        cfg.apply_assignment(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if cfg.data.manifest.is_none() && cfg.data.synth.is_none() {
        cfg.data.synth = Some(SynthSpec::default());
    }
    if let Some(m) = &cfg.data.manifest {
        cfg.data.manifest = Some(std::path::absolute(m).map_err(|e| Error::io(m, e))?);
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| {
            std::env::var_os("FTX_OUT_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command)
        });
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn save_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let snapshot = RunConfig {
        out_dir: Some(dir.to_path_buf()),
        ..cfg.clone()
    };
    write_json(&dir.join(RESOLVED), &snapshot)
}

fn run_metadata(cfg: &RunConfig) -> serde_json::Value {
    json!({
        "train": cfg.train,
        "data": cfg.data,
        "optimizer": {
            "kind": "adam",
            "lr": cfg.train.lr,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "weight_decay": 0.0,
            "clip_norm": cfg.train.clip_norm,
        },
    })
}

pub fn synth(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        if let Some(s) = cfg.data.synth.as_mut() {
            s.seed = seed;
        }
    }
    let spec = cfg
        .data
        .synth
        .clone()
        .ok_or_else(|| Error::Config("synth needs data.synth, not data.manifest".into()))?;
    let dir = out_dir(common, &cfg, "synth")?;
    let data = cfg.load_data()?;

    let csv_path = dir.join("synth.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(&data.series, "timestamp", std::io::BufWriter::new(file))?;
    write_json(&dir.join("ground_truth.json"), &data.truth)?;
    let manifest = Manifest {
        csv_path: PathBuf::from("synth.csv"),
        timestamp_col: "timestamp".into(),
        endo_cols: data.series.endo_names.clone(),
        exo_cols: data.series.exo_names.clone(),
        lookback: cfg.model.lookback,
        horizon: cfg.data.horizon,
        train_frac: cfg.data.train_frac,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    save_resolved(&dir, &cfg)?;
    eprintln!("wrote {} rows (seed {}) to {}", data.series.len(), spec.seed, csv_path.display());
    Ok(())
}

fn train_model(cfg: &RunConfig, model_cfg: &ModelConfig, data: &Prepared<f64>, log_path: Option<&Path>) -> Result<FTimeXer<f64>> {
    let model = FTimeXer::<f64>::new(model_cfg.clone(), cfg.train.seed)?;
    let mut log = String::new();
    let fitted = fit_with(model, &data.train, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  l_pred {:.5}  l_cons {:.5}  val {}",
            r.epoch,
            r.l_pred,
            r.l_cons,
            r.val_mse.map_or("-".into(), |v| format!("{v:.5}"))
        );
        log += &serde_json::to_string(r).expect("epoch record serializes");
        log.push('\n');
    })?;
    if let Some(p) = log_path {
        write_text(p, &log)?;
    }
    Ok(fitted.model)
}

pub fn train(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    let dir = out_dir(common, &cfg, "train")?;
    let (_, data) = cfg.prepare::<f64>()?;
    save_resolved(&dir, &cfg)?;
    let model = train_model(&cfg, &cfg.model, &data, Some(&dir.join("train_log.jsonl")))?;
    let ckpt = dir.join(CHECKPOINT);
    model.to_checkpoint(run_metadata(&cfg)).write(&ckpt)?;
    eprintln!("checkpoint written to {}", ckpt.display());
    Ok(())
}

pub fn eval(common: &Common, checkpoint: &Path, split: Split, plot: bool) -> Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let model = FTimeXer::<f64>::from_checkpoint(&ckpt)?;
    let common = match &common.config {
        Some(_) => common.clone(),
        None => Common {
            config: Some(checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED)),
            ..common.clone()
        },
    };
    let mut cfg = load_config(&common)?;
    cfg.out_dir = None;
    let dir = out_dir(&common, &cfg, "eval")?;
    cfg.model.lookback = ckpt.config.lookback;
    let (loaded, data) = cfg.prepare::<f64>()?;
    if cfg.model.lookback != ckpt.config.lookback {
        return Err(Error::Config(format!(
            "checkpoint lookback {} does not match dataset lookback {}",
            ckpt.config.lookback, cfg.model.lookback
        )));
    }

    let (samples, windows, name) = match split {
        Split::Train => (&data.train, &data.train_windows, "train"),
        Split::Test => (&data.test, &data.test_windows, "test"),
    };
    let started = Instant::now();
    let ev = evaluate(&model, samples, &data.normalizer)?;
    let report = EvalReport {
        metrics: ev.metrics,
        n_test: samples.len(),
        config_hash: config_hash(&json!({ "model": ckpt.config, "seed": ckpt.seed }))?,
        seed: ckpt.seed,
        tags: AblationTags::of(&ckpt.config),
        wall_ms: started.elapsed().as_millis() as u64,
    };
    let d = ckpt.config.d_endo;
    let stamps: Vec<String> = windows
        .iter()
        .flat_map(|w| {
            let t = loaded.series.timestamps[w.target_row].format(TIMESTAMP_FORMAT).to_string();
            std::iter::repeat_n(t, d)
        })
        .collect();

    write_text(&dir.join(format!("report_{name}.csv")), &eval_csv(name, &report))?;
    write_text(
        &dir.join(format!("report_{name}.txt")),
        &metrics_table(&[(format!("{name} split"), report.metrics)]),
    )?;
    write_text(
        &dir.join(format!("predictions_{name}.csv")),
        &predictions_csv(&stamps, &ev.truth, &ev.prediction)?,
    )?;
    if plot {
        let x: Vec<f64> = (0..ev.truth.len()).map(|i| i as f64).collect();
        let svg = line_chart(
            &format!("Prediction vs ground truth ({name} split)"),
            "window",
            &loaded.series.endo_names.join(", "),
            &[
                Line { label: "ground truth", color: "#1f77b4", x: x.clone(), y: &ev.truth },
                Line { label: "prediction", color: "#d62728", x, y: &ev.prediction },
            ],
        );
        write_text(&dir.join(format!("predictions_{name}.svg")), &svg)?;
    }
    save_resolved(&dir, &cfg)?;
    print!("{}", metrics_table(&[(format!("{name} split"), report.metrics)]));
    Ok(())
}

pub fn ablate(common: &Common, seeds: Option<Vec<u64>>, with_no_freq: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = seeds {
        cfg.eval.seeds = s;
    }
    cfg.eval.with_no_freq_baseline |= with_no_freq;
    let dir = out_dir(common, &cfg, "ablate")?;
    let (_, data) = cfg.prepare::<f64>()?;
    cfg.validate()?;
    save_resolved(&dir, &cfg)?;

    let grid = default_grid(&cfg.model, cfg.eval.with_no_freq_baseline);
    let outcome = run_ablation_grid(&data, &grid, &cfg.train, &cfg.eval.seeds, Some(&dir))?;
    if outcome.resumed > 0 {
        eprintln!("{} of {} runs restored from markers", outcome.resumed, outcome.runs.len());
    }
    write_text(&dir.join("ablation.csv"), &ablation_csv(&outcome.runs, &outcome.aggregates))?;
    let rows: Vec<_> = outcome.aggregates.iter().map(|a| (a.label.clone(), a.metrics)).collect();
    let table = metrics_table(&rows);
    write_text(&dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn robustness(common: &Common, plot: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    let dir = out_dir(common, &cfg, "robustness")?;
    let (_, data) = cfg.prepare::<f64>()?;
    save_resolved(&dir, &cfg)?;

    let robust_cfg = ModelConfig {
        robust_training: true,
        robust_objective: RobustObjective::Consistency,
        ..cfg.model.clone()
    };
    let plain_cfg = ModelConfig {
        robust_training: false,
        ..cfg.model.clone()
    };
    let mut curves: Vec<(&str, Vec<CurvePoint>)> = Vec::new();
    for (name, model_cfg) in [("robust", &robust_cfg), ("plain", &plain_cfg)] {
        eprintln!("training {name} model");
        let model = train_model(&cfg, model_cfg, &data, Some(&dir.join(format!("train_log_{name}.jsonl"))))?;
        model
            .to_checkpoint(run_metadata(&cfg))
            .write(&dir.join(format!("model_{name}.ckpt")))?;
        let curve = robustness_eval(
            &model,
            &data.test,
            &data.normalizer,
            &cfg.eval.missing_levels,
            &cfg.eval.shifts,
            cfg.eval.corruption_seed,
        )?;
        write_text(&dir.join(format!("curve_{name}.csv")), &curve_csv(&curve))?;
        curves.push((name, curve));
    }

    let gaps = degradation_gaps(&curves[0].1, &curves[1].1)?;
    let mut text = String::from("missing_frac,shift,robust_increase,plain_increase,gap\n");
    for g in &gaps {
        text += &format!(
            "{},{},{},{},{}\n",
            g.corruption.missing_frac, g.corruption.shift, g.robust_increase, g.plain_increase, g.gap
        );
    }
    write_text(&dir.join("gaps.csv"), &text)?;
    print!("{text}");

    if plot {
        let first_shift = cfg.eval.shifts.first().copied().unwrap_or(0);
        let series: Vec<(Vec<f64>, Vec<f64>)> = curves
            .iter()
            .map(|(_, c)| {
                c.iter()
                    .filter(|p| p.corruption.shift == first_shift)
                    .map(|p| (p.corruption.missing_frac, p.metrics.mse))
                    .unzip()
            })
            .collect();
        let svg = line_chart(
            &format!("Test MSE under missing exogenous data (shift {first_shift} h)"),
            "missing fraction",
            "MSE",
            &[
                Line { label: "robust", color: "#2ca02c", x: series[0].0.clone(), y: &series[0].1 },
                Line { label: "plain", color: "#ff7f0e", x: series[1].0.clone(), y: &series[1].1 },
            ],
        );
        write_text(&dir.join("robustness.svg"), &svg)?;
    }
    Ok(())
}
