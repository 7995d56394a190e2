//! Serializable run configuration with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ingest_csv, prepare, synth_generate, GroundTruth, IngestReport, Manifest, Prepared, RawSeries, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_MISSING_LEVELS, DEFAULT_SHIFTS};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::train::TrainConfig;

/// Where the series comes from: a dataset manifest or a synthetic recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub train_frac: f64,
    pub horizon: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: None,
            train_frac: 0.8,
            horizon: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds per ablation cell.
    pub seeds: Vec<u64>,
    pub missing_levels: Vec<f64>,
    pub shifts: Vec<usize>,
    /// Seed for test-time corruption masks.
    pub corruption_seed: u64,
    /// Adds a baseline without the frequency branch to the ablation grid.
    pub with_no_freq_baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            missing_levels: DEFAULT_MISSING_LEVELS.to_vec(),
            shifts: DEFAULT_SHIFTS.to_vec(),
            corruption_seed: 0,
            with_no_freq_baseline: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out_dir: Option<PathBuf>,
}

/// Short names accepted by [`RunConfig::apply_override`].
pub const ALIASES: [(&str, &str); 7] = [
    ("p", "model.mask_prob"),
    ("lambda", "model.lambda"),
    ("seed", "train.seed"),
    ("epochs", "train.epochs"),
    ("lr", "train.lr"),
    ("batch", "train.batch_size"),
    ("seeds", "eval.seeds"),
];

/// A loaded series together with where it came from.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub series: RawSeries,
    pub ingest: Option<IngestReport>,
    pub truth: Option<GroundTruth>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// Sets `key` (a dotted path such as `model.d_model`, or an alias) to
    /// `value`, parsed as JSON when possible and as a string otherwise.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let path = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, p)| p);
        let mut root = serde_json::to_value(&*self)?;
        let parsed = serde_json::from_str::<Value>(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut slot = &mut root;
        for part in path.split('.') {
            let obj = match slot {
                Value::Object(map) => map,
                Value::Null => {
                    *slot = Value::Object(Default::default());
                    slot.as_object_mut().expect("just set")
                }
                _ => return Err(Error::Config(format!("`{path}`: `{part}` is not inside an object"))),
            };
            slot = obj.entry(part.to_string()).or_insert(Value::Null);
        }
        *slot = parsed;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("--set {key}={value}: {e}")))?;
        Ok(())
    }

    /// Parses `k=v` and applies it.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        self.apply_override(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.manifest, &self.data.synth) {
            (Some(_), Some(_)) => return Err(Error::Config("data.manifest and data.synth are mutually exclusive".into())),
            (None, None) => return Err(Error::Config("one of data.manifest or data.synth is required".into())),
            _ => {}
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        if self.eval.missing_levels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("eval.missing_levels must lie in [0, 1]".into()));
        }
        self.train.validate()
    }

    /// Reads or generates the series. With a manifest, its lookback,
    /// horizon and split fraction take precedence over this config.
    pub fn load_data(&mut self) -> Result<LoadedData> {
        self.validate()?;
        if let Some(path) = self.data.manifest.clone() {
            let manifest = Manifest::read(&path)?;
            let (series, report) = ingest_csv(&manifest.csv_path, &manifest.schema())?;
            self.model.lookback = manifest.lookback;
            self.data.horizon = manifest.horizon;
            self.data.train_frac = manifest.train_frac;
            self.bind_dims(&series);
            return Ok(LoadedData {
                series,
                ingest: Some(report),
                truth: None,
            });
        }
        let spec = self.data.synth.clone().expect("validated");
        let (series, truth) = synth_generate(&spec)?;
        self.bind_dims(&series);
        Ok(LoadedData {
            series,
            ingest: None,
            truth: Some(truth),
        })
    }

    fn bind_dims(&mut self, series: &RawSeries) {
        self.model.d_endo = series.d_endo();
        self.model.d_exo = series.d_exo();
    }

    /// Loads, windows, splits and normalizes the data, returning the
    /// resolved configuration.
    pub fn prepare<S: Scalar>(&mut self) -> Result<(LoadedData, Prepared<S>)> {
        let data = self.load_data()?;
        self.model.validate()?;
        let prepared = prepare(&data.series, self.model.lookback, self.data.horizon, self.data.train_frac)?;
        Ok((data, prepared))
    }
}
