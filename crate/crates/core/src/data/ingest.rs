use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{Error, Result};

/// Format used when writing timestamps.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

const NAIVE_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// Column roles in a CSV file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub timestamp_col: String,
    pub endo_cols: Vec<String>,
    #[serde(default)]
    pub exo_cols: Vec<String>,
}

/// Dataset description consumed by the command line tool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub csv_path: PathBuf,
    pub timestamp_col: String,
    pub endo_cols: Vec<String>,
    #[serde(default)]
    pub exo_cols: Vec<String>,
    #[serde(default = "default_lookback")]
    pub lookback: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
}

fn default_lookback() -> usize {
    12
}

fn default_horizon() -> usize {
    1
}

fn default_train_frac() -> f64 {
    0.8
}

impl Manifest {
    pub fn schema(&self) -> Schema {
        Schema {
            timestamp_col: self.timestamp_col.clone(),
            endo_cols: self.endo_cols.clone(),
            exo_cols: self.exo_cols.clone(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        if m.csv_path.is_relative() {
            if let Some(dir) = path.parent() {
                m.csv_path = dir.join(&m.csv_path);
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejected {
    /// 1-based line in the source file.
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rejected: Vec<Rejected>,
    /// Missing rows inserted for skipped hours.
    pub gap_rows: usize,
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.naive_utc());
    }
    NAIVE_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
}

fn parse_cell(raw: &str) -> std::result::Result<f64, ()> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") || raw == "null" {
        return Ok(f64::NAN);
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(()),
    }
}

pub fn ingest_csv(path: &Path, schema: &Schema) -> Result<(RawSeries, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, schema)
}

/// Parses an hourly CSV. Rows with unparseable timestamps or values and
/// repeated timestamps are rejected and reported; skipped hours become
/// missing rows; a timestamp earlier than its predecessor is an error.
pub fn ingest_reader(reader: impl Read, schema: &Schema) -> Result<(RawSeries, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let wanted: Vec<&String> = std::iter::once(&schema.timestamp_col)
        .chain(&schema.endo_cols)
        .chain(&schema.exo_cols)
        .collect();
    let absent: Vec<&str> = wanted.iter().filter(|n| find(n).is_none()).map(|n| n.as_str()).collect();
    if !absent.is_empty() {
        return Err(Error::Schema(format!("missing required column(s): {}", absent.join(", "))));
    }
    if schema.endo_cols.is_empty() {
        return Err(Error::Schema("at least one endogenous column is required".into()));
    }
    let ts_idx = find(&schema.timestamp_col).expect("checked");
    let endo_idx: Vec<usize> = schema.endo_cols.iter().map(|c| find(c).expect("checked")).collect();
    let exo_idx: Vec<usize> = schema.exo_cols.iter().map(|c| find(c).expect("checked")).collect();
    let (de, dx) = (endo_idx.len(), exo_idx.len());

    let mut report = IngestReport::default();
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut endo = Vec::new();
    let mut exo = Vec::new();
    let mut prev_line = 0;
    let hour = TimeDelta::hours(1);

    for record in rdr.records() {
        let record = record?;
        report.rows_read += 1;
        let line = record.position().map_or(0, |p| p.line());
        let reject = |reason: String| Rejected { line, reason };
        let raw_ts = record.get(ts_idx).unwrap_or("");
        let Some(ts) = parse_timestamp(raw_ts) else {
            report.rejected.push(reject(format!("unparseable timestamp `{raw_ts}`")));
            continue;
        };
        let cells = |idx: &[usize]| -> std::result::Result<Vec<f64>, String> {
            idx.iter()
                .map(|&i| {
                    let raw = record.get(i).unwrap_or("");
                    parse_cell(raw).map_err(|_| format!("unparseable value `{raw}` in column `{}`", &headers[i]))
                })
                .collect()
        };
        let (e, x) = match (cells(&endo_idx), cells(&exo_idx)) {
            (Ok(e), Ok(x)) => (e, x),
            (Err(msg), _) | (_, Err(msg)) => {
                report.rejected.push(reject(msg));
                continue;
            }
        };
        if let Some(&last) = timestamps.last() {
            if ts == last {
                report.rejected.push(reject(format!("duplicate timestamp {ts}")));
                continue;
            }
            if ts < last {
                return Err(Error::Ordering {
                    line: line as usize,
                    previous: format!("{last} (line {prev_line})"),
                    current: ts.to_string(),
                });
            }
            let step = ts - last;
            if step.num_seconds() % 3600 != 0 || step.subsec_nanos() != 0 {
                return Err(Error::Data(format!(
                    "line {line}: timestamp {ts} is not a whole number of hours after {last}"
                )));
            }
            for k in 1..step.num_hours() {
                timestamps.push(last + hour * k as i32);
                endo.extend(std::iter::repeat_n(f64::NAN, de));
                exo.extend(std::iter::repeat_n(f64::NAN, dx));
                report.gap_rows += 1;
            }
        }
        timestamps.push(ts);
        endo.extend(e);
        exo.extend(x);
        prev_line = line;
    }
    if timestamps.is_empty() {
        return Err(Error::Data("no valid rows".into()));
    }
    let series = RawSeries::from_rows(
        timestamps,
        schema.endo_cols.clone(),
        schema.exo_cols.clone(),
        endo,
        exo,
    )?;
    Ok((series, report))
}

/// Writes `s` in the layout [`ingest_reader`] accepts, missing cells as `NA`.
pub fn write_csv(s: &RawSeries, timestamp_col: &str, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = std::iter::once(timestamp_col)
        .chain(s.endo_names.iter().map(String::as_str))
        .chain(s.exo_names.iter().map(String::as_str))
        .collect();
    w.write_record(&header)?;
    let cell = |v: f64, missing: bool| if missing { "NA".to_string() } else { v.to_string() };
    let (de, dx) = (s.d_endo(), s.d_exo());
    for (r, ts) in s.timestamps.iter().enumerate() {
        let mut row = vec![ts.format(TIMESTAMP_FORMAT).to_string()];
        row.extend((0..de).map(|c| cell(s.endo[r * de + c], s.endo_missing[r * de + c])));
        row.extend((0..dx).map(|c| cell(s.exo[r * dx + c], s.exo_missing[r * dx + c])));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing csv: {e}")))?;
    Ok(())
}
