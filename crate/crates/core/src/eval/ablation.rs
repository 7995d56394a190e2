use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{config_hash, evaluate, AblationTags, EvalReport, Metrics};
use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::model::{FTimeXer, ModelConfig, RobustObjective};
use crate::scalar::Scalar;
use crate::train::{fit_with, TrainConfig};

pub const MASK_LEVELS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub model: ModelConfig,
}

impl AblationCell {
    fn slug(&self) -> String {
        let mut s: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
            .collect();
        while s.contains("--") {
            s = s.replace("--", "-");
        }
        s.trim_matches('-').to_string()
    }
}

/// Baseline, mask-only rows at 10-50 %, and the full model with masking at
/// `base.mask_prob` plus consistency. `with_no_freq` appends a baseline that
/// also drops the frequency branch.
pub fn default_grid(base: &ModelConfig, with_no_freq: bool) -> Vec<AblationCell> {
    let cell = |label: String, model: ModelConfig| AblationCell { label, model };
    let mut grid = vec![cell(
        "Baseline".into(),
        ModelConfig {
            robust_training: false,
            ..base.clone()
        },
    )];
    for p in MASK_LEVELS {
        grid.push(cell(
            format!("Masking {}%", (p * 100.0).round()),
            ModelConfig {
                robust_training: true,
                robust_objective: RobustObjective::MaskOnly,
                mask_prob: p,
                ..base.clone()
            },
        ));
    }
    grid.push(cell(
        "FTimeXer".into(),
        ModelConfig {
            robust_training: true,
            robust_objective: RobustObjective::Consistency,
            freq_branch: true,
            ..base.clone()
        },
    ));
    if with_no_freq {
        grid.push(cell(
            "Baseline (no freq)".into(),
            ModelConfig {
                robust_training: false,
                freq_branch: false,
                ..base.clone()
            },
        ));
    }
    grid
}

/// One (cell, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub report: EvalReport,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Largest logged consistency loss over all epochs.
    pub max_l_cons: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub seeds: usize,
    /// Seed means; R² is undefined if it is undefined for any seed.
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    /// Runs restored from completion markers instead of retrained.
    pub resumed: usize,
}

fn run_hash(cell: &AblationCell, train: &TrainConfig, seed: u64) -> Result<String> {
    config_hash(&serde_json::json!({
        "model": cell.model,
        "train": TrainConfig { seed, ..train.clone() },
    }))
}

fn marker_path(dir: &Path, cell: &AblationCell, seed: u64) -> PathBuf {
    dir.join("cells").join(format!("{}-seed{seed}.json", cell.slug()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn run_one<S: Scalar>(
    data: &Prepared<S>,
    cell: &AblationCell,
    train: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(RunRecord, bool)> {
    let hash = run_hash(cell, train, seed)?;
    if let Some(dir) = out_dir {
        let marker = marker_path(dir, cell, seed);
        if let Ok(bytes) = fs::read(&marker) {
            if let Ok(rec) = serde_json::from_slice::<RunRecord>(&bytes) {
                if rec.report.config_hash == hash {
                    return Ok((rec, true));
                }
            }
        }
    }

    let started = Instant::now();
    let cfg = TrainConfig { seed, ..train.clone() };
    let model = FTimeXer::<S>::new(cell.model.clone(), seed)?;
    let mut log = Vec::new();
    let fitted = fit_with(model, &data.train, &cfg, |r| log.push(r.clone()))?;
    let ev = evaluate(&fitted.model, &data.test, &data.normalizer)?;
    let record = RunRecord {
        label: cell.label.clone(),
        seed,
        report: EvalReport {
            metrics: ev.metrics,
            n_test: data.test.len(),
            config_hash: hash,
            seed,
            tags: AblationTags::of(&cell.model),
            wall_ms: started.elapsed().as_millis() as u64,
        },
        epochs_run: fitted.log.len(),
        best_epoch: fitted.best_epoch,
        max_l_cons: log.iter().map(|r| r.l_cons).fold(0.0, f64::max),
    };

    if let Some(dir) = out_dir {
        let log_path = dir.join("logs").join(format!("{}-seed{seed}.jsonl", cell.slug()));
        let mut text = Vec::new();
        for r in &log {
            serde_json::to_writer(&mut text, r)?;
            text.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        }
        write_atomic(&log_path, &text)?;
        write_atomic(&marker_path(dir, cell, seed), &serde_json::to_vec_pretty(&record)?)?;
    }
    Ok((record, false))
}

/// Trains and evaluates every cell once per seed. With `out_dir`, each
/// finished run leaves a marker under `cells/` and its epoch log under
/// `logs/`; a rerun restores runs whose marker matches the current
/// configuration instead of training them again.
pub fn run_ablation_grid<S: Scalar>(
    data: &Prepared<S>,
    grid: &[AblationCell],
    train: &TrainConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationOutcome> {
    if let Some(dir) = out_dir {
        for sub in ["cells", "logs"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let jobs: Vec<(&AblationCell, u64)> = grid.iter().flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<(RunRecord, bool)> = jobs
        .par_iter()
        .map(|&(cell, seed)| run_one(data, cell, train, seed, out_dir))
        .collect::<Result<_>>()?;
    let resumed = results.iter().filter(|(_, r)| *r).count();
    let runs: Vec<RunRecord> = results.into_iter().map(|(r, _)| r).collect();

    let aggregates = grid
        .iter()
        .map(|cell| {
            let own: Vec<&RunRecord> = runs.iter().filter(|r| r.label == cell.label).collect();
            let n = own.len() as f64;
            let mean = |f: fn(&Metrics) -> f64| own.iter().map(|r| f(&r.report.metrics)).sum::<f64>() / n;
            let r2 = own
                .iter()
                .map(|r| r.report.metrics.r2)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / n);
            Aggregate {
                label: cell.label.clone(),
                seeds: own.len(),
                metrics: Metrics {
                    r2,
                    mse: mean(|m| m.mse),
                    rmse: mean(|m| m.rmse),
                    mae: mean(|m| m.mae),
                },
            }
        })
        .collect();
    Ok(AblationOutcome {
        runs,
        aggregates,
        resumed,
    })
}
