use std::path::Path;

use super::{Aggregate, CurvePoint, EvalReport, Metrics, RunRecord};
use crate::error::{Error, Result};

fn r2_cell(m: &Metrics) -> String {
    m.r2.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

/// Fixed-width table with columns Model, R², MSE, RMSE, MAE.
pub fn metrics_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>10}  {:>12}  {:>12}  {:>12}\n",
        "Model", "R²", "MSE", "RMSE", "MAE"
    );
    out += &format!("{}\n", "-".repeat(width + 2 + 10 + 3 * 14));
    for (label, m) in rows {
        let r2 = m.r2.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        out += &format!(
            "{label:<width$}  {r2:>10}  {:>12.6}  {:>12.6}  {:>12.6}\n",
            m.mse, m.rmse, m.mae
        );
    }
    out
}

pub const EVAL_CSV_HEADER: &str = "split,n_test,r2,mse,rmse,mae,config_hash,seed,freq_branch,robust,p,lambda";

pub fn eval_csv(split: &str, r: &EvalReport) -> String {
    let m = &r.metrics;
    format!(
        "{EVAL_CSV_HEADER}\n{split},{},{},{},{},{},{},{},{},{},{},{}\n",
        r.n_test,
        r2_cell(m),
        m.mse,
        m.rmse,
        m.mae,
        r.config_hash,
        r.seed,
        r.tags.freq_branch,
        r.tags.robust,
        r.tags.p,
        r.tags.lambda
    )
}

/// Per-(cell, seed) rows followed by one `mean` row per cell.
pub fn ablation_csv(runs: &[RunRecord], aggregates: &[Aggregate]) -> String {
    let mut out = String::from("cell,seed,r2,mse,rmse,mae,n_test,freq_branch,robust,p,lambda,config_hash\n");
    for r in runs {
        let (m, t) = (&r.report.metrics, &r.report.tags);
        out += &format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.seed,
            r2_cell(m),
            m.mse,
            m.rmse,
            m.mae,
            r.report.n_test,
            t.freq_branch,
            t.robust,
            t.p,
            t.lambda,
            r.report.config_hash
        );
    }
    for a in aggregates {
        let m = &a.metrics;
        let tags = runs.iter().find(|r| r.label == a.label).map(|r| r.report.tags);
        let (f, rb, p, l) = tags.map_or((String::new(), String::new(), String::new(), String::new()), |t| {
            (t.freq_branch.to_string(), t.robust.to_string(), t.p.to_string(), t.lambda.to_string())
        });
        out += &format!(
            "{},mean,{},{},{},{},,{f},{rb},{p},{l},\n",
            a.label,
            r2_cell(m),
            m.mse,
            m.rmse,
            m.mae
        );
    }
    out
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("missing_frac,shift,r2,mse,rmse,mae\n");
    for p in points {
        let m = &p.metrics;
        out += &format!(
            "{},{},{},{},{},{}\n",
            p.corruption.missing_frac,
            p.corruption.shift,
            r2_cell(m),
            m.mse,
            m.rmse,
            m.mae
        );
    }
    out
}

/// `timestamp,truth,prediction` rows in physical units.
pub fn predictions_csv(timestamps: &[String], truth: &[f64], prediction: &[f64]) -> Result<String> {
    if timestamps.len() != truth.len() || truth.len() != prediction.len() {
        return Err(Error::LengthMismatch(truth.len(), prediction.len()));
    }
    let mut out = String::from("timestamp,truth,prediction\n");
    for ((t, y), p) in timestamps.iter().zip(truth).zip(prediction) {
        out += &format!("{t},{y},{p}\n");
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
