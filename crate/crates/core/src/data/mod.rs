//! Hourly series ingestion, windowing, chronological splitting,
//! normalization and synthetic data.

mod ingest;
mod synth;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

pub use ingest::{ingest_csv, ingest_reader, write_csv, IngestReport, Manifest, Rejected, Schema, TIMESTAMP_FORMAT};
pub use synth::{synth_generate, Component, GroundTruth, SynthSpec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Sample;

/// Hourly multivariate series on a gap-free grid. Hours absent from the
/// source are present here as rows flagged missing in every column.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub endo_names: Vec<String>,
    pub exo_names: Vec<String>,
    /// Row-major `len x d_endo`; missing cells hold NaN.
    pub endo: Vec<f64>,
    /// Row-major `len x d_exo`; missing cells hold NaN.
    pub exo: Vec<f64>,
    pub endo_missing: Vec<bool>,
    pub exo_missing: Vec<bool>,
}

impl RawSeries {
    /// Builds a series from complete rows; NaN cells are flagged missing.
    pub fn from_rows(
        timestamps: Vec<NaiveDateTime>,
        endo_names: Vec<String>,
        exo_names: Vec<String>,
        endo: Vec<f64>,
        exo: Vec<f64>,
    ) -> Result<Self> {
        let s = Self {
            endo_missing: endo.iter().map(|v| v.is_nan()).collect(),
            exo_missing: exo.iter().map(|v| v.is_nan()).collect(),
            timestamps,
            endo_names,
            exo_names,
            endo,
            exo,
        };
        s.check()?;
        Ok(s)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let n = self.len();
        let (de, dx) = (self.d_endo(), self.d_exo());
        if self.endo.len() != n * de || self.exo.len() != n * dx {
            return Err(Error::Data(format!(
                "{n} timestamps but {} endogenous and {} exogenous cells",
                self.endo.len(),
                self.exo.len()
            )));
        }
        if self.endo_missing.len() != self.endo.len() || self.exo_missing.len() != self.exo.len() {
            return Err(Error::Data("missing bitmap does not match values".into()));
        }
        for (i, pair) in self.timestamps.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(Error::Ordering {
                    line: i + 2,
                    previous: pair[0].to_string(),
                    current: pair[1].to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn d_endo(&self) -> usize {
        self.endo_names.len()
    }

    pub fn d_exo(&self) -> usize {
        self.exo_names.len()
    }

    pub fn endo_at(&self, row: usize, col: usize) -> f64 {
        self.endo[row * self.d_endo() + col]
    }

    pub fn exo_at(&self, row: usize, col: usize) -> f64 {
        self.exo[row * self.d_exo() + col]
    }

    pub fn row_has_missing_endo(&self, row: usize) -> bool {
        let de = self.d_endo();
        self.endo_missing[row * de..(row + 1) * de].iter().any(|&m| m)
    }
}

/// A lookback window and the value `horizon` steps after it.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    /// Series row of the first lookback step.
    pub origin: usize,
    pub lookback: usize,
    /// Row-major `lookback x d_endo`.
    pub x_endo: Vec<f64>,
    /// Row-major `lookback x d_exo`, after last-observation-carried-forward.
    /// Entries with no earlier observation in the window stay NaN until the
    /// normalizer fills them with the training mean.
    pub x_exo: Vec<f64>,
    /// Exogenous cells that were missing in the source.
    pub exo_missing: Vec<bool>,
    pub y: Vec<f64>,
    /// Series row of the target.
    pub target_row: usize,
}

impl SeriesWindow {
    pub fn has_imputed_exo(&self) -> bool {
        self.exo_missing.iter().any(|&m| m)
    }
}

/// Every stride-1 window whose lookback rows and target row have complete
/// endogenous values. Missing exogenous cells are carried forward from the
/// last observation inside the window.
pub fn make_windows(s: &RawSeries, lookback: usize, horizon: usize) -> Result<Vec<SeriesWindow>> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config("lookback and horizon must be positive".into()));
    }
    let span = lookback + horizon;
    if s.len() < span {
        return Err(Error::Data(format!(
            "series of length {} is shorter than lookback + horizon = {span}",
            s.len()
        )));
    }
    let (de, dx) = (s.d_endo(), s.d_exo());
    let bad_rows: Vec<bool> = (0..s.len()).map(|r| s.row_has_missing_endo(r)).collect();
    let mut out = Vec::new();
    for origin in 0..=s.len() - span {
        let target_row = origin + span - 1;
        // Rows between the lookback and the target are part of the window's
        // hours too when horizon > 1.
        if bad_rows[origin..=target_row].iter().any(|&b| b) {
            continue;
        }
        let x_endo = s.endo[origin * de..(origin + lookback) * de].to_vec();
        let mut x_exo = s.exo[origin * dx..(origin + lookback) * dx].to_vec();
        let exo_missing = s.exo_missing[origin * dx..(origin + lookback) * dx].to_vec();
        for col in 0..dx {
            let mut last = f64::NAN;
            for t in 0..lookback {
                let i = t * dx + col;
                if exo_missing[i] {
                    x_exo[i] = last;
                } else {
                    last = x_exo[i];
                }
            }
        }
        out.push(SeriesWindow {
            origin,
            lookback,
            x_endo,
            x_exo,
            exo_missing,
            y: s.endo[target_row * de..(target_row + 1) * de].to_vec(),
            target_row,
        });
    }
    Ok(out)
}

/// First `floor(train_frac * n)` windows for training, the rest for testing.
pub fn chronological_split<T: Clone>(windows: &[T], train_frac: f64) -> Result<(Vec<T>, Vec<T>)> {
    let n = windows.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 windows to split, got {n}")));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train_frac must be in (0, 1), got {train_frac}")));
    }
    let k = (train_frac * n as f64).floor() as usize;
    if k == 0 || k == n {
        return Err(Error::Data(format!(
            "train_frac {train_frac} leaves an empty split for {n} windows"
        )));
    }
    Ok((windows[..k].to_vec(), windows[k..].to_vec()))
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-column z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub endo_mean: Vec<f64>,
    pub endo_std: Vec<f64>,
    pub exo_mean: Vec<f64>,
    pub exo_std: Vec<f64>,
}

/// Welford mean/variance over the distinct series rows seen.
struct ColumnStats {
    seen: Vec<bool>,
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: Vec<usize>,
}

impl ColumnStats {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            seen: vec![false; rows],
            mean: vec![0.0; cols],
            m2: vec![0.0; cols],
            count: vec![0; cols],
        }
    }

    fn add_row(&mut self, row: usize, values: &[f64], missing: &[bool]) {
        if std::mem::replace(&mut self.seen[row], true) {
            return;
        }
        for (c, (&v, &m)) in values.iter().zip(missing).enumerate() {
            if !m && v.is_finite() {
                self.count[c] += 1;
                let delta = v - self.mean[c];
                self.mean[c] += delta / self.count[c] as f64;
                self.m2[c] += delta * (v - self.mean[c]);
            }
        }
    }

    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let stds = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(&m2, &n)| if n == 0 { 1.0 } else { (m2 / n as f64).sqrt().max(STD_FLOOR) })
            .collect();
        (self.mean, stds)
    }
}

impl Normalizer {
    /// Statistics over the distinct series rows covered by `train`: every
    /// lookback row and every target row. Missing source cells are skipped.
    pub fn fit(train: &[SeriesWindow]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Data("cannot fit a normalizer on an empty split".into()))?;
        let de = first.y.len();
        let dx = first.exo_missing.len() / first.lookback.max(1);
        let rows = train.iter().map(|w| w.target_row + 1).max().unwrap_or(0);
        let mut endo = ColumnStats::new(rows, de);
        let mut exo = ColumnStats::new(rows, dx);
        let clean = vec![false; de.max(dx)];
        for w in train {
            for t in 0..w.lookback {
                let row = w.origin + t;
                endo.add_row(row, &w.x_endo[t * de..(t + 1) * de], &clean[..de]);
                exo.add_row(row, &w.x_exo[t * dx..(t + 1) * dx], &w.exo_missing[t * dx..(t + 1) * dx]);
            }
            endo.add_row(w.target_row, &w.y, &clean[..de]);
        }
        let (endo_mean, endo_std) = endo.finish();
        let (exo_mean, exo_std) = exo.finish();
        Ok(Self {
            endo_mean,
            endo_std,
            exo_mean,
            exo_std,
        })
    }

    pub fn d_endo(&self) -> usize {
        self.endo_mean.len()
    }

    pub fn d_exo(&self) -> usize {
        self.exo_mean.len()
    }

    /// Normalizes a window into a model sample. Exogenous cells still NaN
    /// after carry-forward take the training mean, i.e. zero.
    pub fn apply<S: Scalar>(&self, w: &SeriesWindow) -> Result<Sample<S>> {
        let (de, dx) = (self.d_endo(), self.d_exo());
        if w.y.len() != de || w.x_exo.len() != w.lookback * dx {
            return Err(Error::Data(format!(
                "window with {} endogenous and {} exogenous columns does not match normalizer ({de}, {dx})",
                w.y.len(),
                w.x_exo.len() / w.lookback.max(1)
            )));
        }
        let z = |v: f64, m: f64, s: f64| S::of((v - m) / s);
        let x_endo = w
            .x_endo
            .iter()
            .enumerate()
            .map(|(i, &v)| z(v, self.endo_mean[i % de], self.endo_std[i % de]))
            .collect();
        let x_exo = w
            .x_exo
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v.is_nan() {
                    S::zero()
                } else {
                    z(v, self.exo_mean[i % dx], self.exo_std[i % dx])
                }
            })
            .collect();
        let y = w
            .y
            .iter()
            .enumerate()
            .map(|(i, &v)| z(v, self.endo_mean[i], self.endo_std[i]))
            .collect();
        Ok(Sample {
            x_endo: Tensor::new([w.lookback, de], x_endo)?,
            x_exo: Tensor::new([w.lookback, dx], x_exo)?,
            y: Tensor::new([de], y)?,
        })
    }

    /// Maps normalized endogenous values (row-major, `d_endo` columns) back
    /// to physical units.
    pub fn inverse_endo(&self, values: &[f64]) -> Vec<f64> {
        let de = self.d_endo();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.endo_std[i % de] + self.endo_mean[i % de])
            .collect()
    }

    pub fn normalize_endo(&self, values: &[f64]) -> Vec<f64> {
        let de = self.d_endo();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.endo_mean[i % de]) / self.endo_std[i % de])
            .collect()
    }
}

/// Windows, split and normalized samples for one series.
#[derive(Clone, Debug)]
pub struct Prepared<S> {
    pub train_windows: Vec<SeriesWindow>,
    pub test_windows: Vec<SeriesWindow>,
    pub normalizer: Normalizer,
    pub train: Vec<Sample<S>>,
    pub test: Vec<Sample<S>>,
}

pub fn prepare<S: Scalar>(s: &RawSeries, lookback: usize, horizon: usize, train_frac: f64) -> Result<Prepared<S>> {
    let windows = make_windows(s, lookback, horizon)?;
    let (train_windows, test_windows) = chronological_split(&windows, train_frac)?;
    let normalizer = Normalizer::fit(&train_windows)?;
    let train = train_windows.iter().map(|w| normalizer.apply(w)).collect::<Result<_>>()?;
    let test = test_windows.iter().map(|w| normalizer.apply(w)).collect::<Result<_>>()?;
    Ok(Prepared {
        train_windows,
        test_windows,
        normalizer,
        train,
        test,
    })
}
