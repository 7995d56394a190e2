//! Metrics, evaluation runs, ablation grids and robustness curves.

mod ablation;
mod report;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ablation::{default_grid, run_ablation_grid, AblationCell, AblationOutcome, Aggregate, RunRecord, MASK_LEVELS};
pub use report::{
    ablation_csv, curve_csv, eval_csv, metrics_table, predictions_csv, write_text, EVAL_CSV_HEADER,
};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::{FTimeXer, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{MaskGranularity, MaskSpec, Sample};

/// R² is `None` when the targets have (numerically) zero spread.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: Option<f64>,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
}

pub const SS_TOT_FLOOR: f64 = 1e-12;

pub fn compute_metrics<S: Scalar>(y: &[S], y_hat: &[S]) -> Result<Metrics> {
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = y.len() as f64;
    let mean = y.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mut ss_res, mut ss_tot, mut abs) = (0.0, 0.0, 0.0);
    for (t, p) in y.iter().zip(y_hat) {
        let (t, p) = (t.as_f64(), p.as_f64());
        ss_res += (t - p) * (t - p);
        ss_tot += (t - mean) * (t - mean);
        abs += (t - p).abs();
    }
    let mse = ss_res / n;
    Ok(Metrics {
        r2: (ss_tot >= SS_TOT_FLOOR).then(|| 1.0 - ss_res / ss_tot),
        mse,
        rmse: mse.sqrt(),
        mae: abs / n,
    })
}

/// Ablation switches recorded with every report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTags {
    pub freq_branch: bool,
    pub robust: bool,
    pub p: f64,
    pub lambda: f64,
}

impl AblationTags {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            freq_branch: cfg.freq_branch,
            robust: cfg.robust_training,
            p: cfg.mask_prob,
            lambda: cfg.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub n_test: usize,
    pub config_hash: String,
    pub seed: u64,
    pub tags: AblationTags,
    /// Kept out of the report files so reruns produce identical bytes.
    pub wall_ms: u64,
}

/// Physical-unit predictions and metrics for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub truth: Vec<f64>,
    pub prediction: Vec<f64>,
}

/// Short stable digest of any serializable configuration. Object keys are
/// sorted before hashing.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?.to_string();
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Predicts every sample with clean inputs and scores in physical units.
pub fn evaluate<S: Scalar>(model: &FTimeXer<S>, samples: &[Sample<S>], norm: &Normalizer) -> Result<Evaluation> {
    evaluate_with(model, samples, norm, |x| Ok(x.clone()))
}

fn evaluate_with<S: Scalar>(
    model: &FTimeXer<S>,
    samples: &[Sample<S>],
    norm: &Normalizer,
    mut exo: impl FnMut(&Tensor<S>) -> Result<Tensor<S>>,
) -> Result<Evaluation> {
    let cfg = model.config();
    if norm.d_endo() != cfg.d_endo || norm.d_exo() != cfg.d_exo {
        return Err(Error::Config(format!(
            "model expects {} endogenous / {} exogenous columns, dataset has {} / {}",
            cfg.d_endo,
            cfg.d_exo,
            norm.d_endo(),
            norm.d_exo()
        )));
    }
    let mut truth = Vec::with_capacity(samples.len() * cfg.d_endo);
    let mut prediction = Vec::with_capacity(truth.capacity());
    for s in samples {
        let x = exo(&s.x_exo)?;
        let y_hat: Vec<f64> = model.predict(&s.x_endo, &x)?.iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = s.y.data().iter().map(|v| v.as_f64()).collect();
        prediction.extend(norm.inverse_endo(&y_hat));
        truth.extend(norm.inverse_endo(&y));
    }
    Ok(Evaluation {
        metrics: compute_metrics(&truth, &prediction)?,
        truth,
        prediction,
    })
}

/// Test-time damage to the exogenous block of one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Share of exogenous entries zeroed (the training mean after
    /// normalization).
    pub missing_frac: f64,
    /// Circular shift of exogenous rows, in hours.
    pub shift: usize,
}

/// Shifts rows circularly (row `t` takes row `t - shift`), then zeroes
/// entries with probability `missing_frac`.
pub fn corrupt_exo<S: Scalar>(x: &Tensor<S>, c: &Corruption, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
    let (rows, cols) = x.dims2()?;
    let mut shifted = x.clone();
    if rows > 0 {
        for t in 0..rows {
            let src = (t + rows - c.shift % rows) % rows;
            for j in 0..cols {
                shifted.set(t, j, x.at(src, j));
            }
        }
    }
    let mask: Tensor<S> = MaskSpec::new(c.missing_frac, MaskGranularity::Entry)?.sample(rows, cols, rng)?;
    let data = shifted.data().iter().zip(mask.data()).map(|(a, m)| *a * *m).collect();
    Tensor::new([rows, cols], data)
}

pub const DEFAULT_MISSING_LEVELS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
pub const DEFAULT_SHIFTS: [usize; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub corruption: Corruption,
    pub metrics: Metrics,
}

/// Metrics at every (missing fraction, shift) pair. Each point draws its
/// masks from a fresh generator seeded with `seed`, so two models scored
/// with the same seed see identical corruption.
pub fn robustness_eval<S: Scalar>(
    model: &FTimeXer<S>,
    samples: &[Sample<S>],
    norm: &Normalizer,
    missing_levels: &[f64],
    shifts: &[usize],
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(missing_levels.len() * shifts.len());
    for &shift in shifts {
        for &missing_frac in missing_levels {
            let corruption = Corruption { missing_frac, shift };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ev = evaluate_with(model, samples, norm, |x| corrupt_exo(x, &corruption, &mut rng))?;
            out.push(CurvePoint {
                corruption,
                metrics: ev.metrics,
            });
        }
    }
    Ok(out)
}

/// MSE increase over the uncorrupted point, for a paired pair of curves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapPoint {
    pub corruption: Corruption,
    pub robust_increase: f64,
    pub plain_increase: f64,
    /// `plain_increase - robust_increase`; positive favours robust training.
    pub gap: f64,
}

pub fn degradation_gaps(robust: &[CurvePoint], plain: &[CurvePoint]) -> Result<Vec<GapPoint>> {
    if robust.len() != plain.len() {
        return Err(Error::LengthMismatch(robust.len(), plain.len()));
    }
    let clean = |curve: &[CurvePoint]| {
        curve
            .iter()
            .find(|p| p.corruption.missing_frac == 0.0 && p.corruption.shift == 0)
            .map(|p| p.metrics.mse)
            .ok_or_else(|| Error::Data("curve has no uncorrupted point".into()))
    };
    let (r0, p0) = (clean(robust)?, clean(plain)?);
    robust
        .iter()
        .zip(plain)
        .map(|(r, p)| {
            if r.corruption != p.corruption {
                return Err(Error::Data("curves sample different corruption levels".into()));
            }
            let (ri, pi) = (r.metrics.mse - r0, p.metrics.mse - p0);
            Ok(GapPoint {
                corruption: r.corruption,
                robust_increase: ri,
                plain_increase: pi,
                gap: pi - ri,
            })
        })
        .collect()
}
