use chrono::{NaiveDateTime, TimeDelta};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{Error, Result};

pub const MIN_SYNTH_LENGTH: usize = 200;

/// One sinusoid `amplitude * sin(2 pi t / period + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub period: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Recipe for a synthetic hourly emissions-like series.
///
/// The target is `level + trend * t + sum of components + driver_gain *
/// d_t + noise`, where `d` is a latent AR(1) driver. Exogenous column
/// `driver_lead` observes `d_{t+lead}` and `driver_lag` observes `d_{t-2}`,
/// each with small observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub length: usize,
    pub seed: u64,
    pub start: NaiveDateTime,
    pub level: f64,
    pub trend: f64,
    pub components: Vec<Component>,
    pub noise_sigma: f64,
    pub driver_ar: f64,
    pub driver_sigma: f64,
    pub driver_gain: f64,
    pub lead: usize,
    pub exo_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 4320,
            seed: 0,
            start: NaiveDateTime::parse_from_str("2023-01-01T00:00:00", super::TIMESTAMP_FORMAT)
                .expect("valid literal"),
            level: 10.0,
            trend: 5e-4,
            components: vec![
                Component { period: 24.0, amplitude: 2.0, phase: 0.0 },
                Component { period: 168.0, amplitude: 1.0, phase: 0.0 },
            ],
            noise_sigma: 0.3,
            driver_ar: 0.8,
            driver_sigma: 0.6,
            driver_gain: 1.0,
            lead: 1,
            exo_noise: 0.05,
        }
    }
}

/// What was put into a synthetic series, for spectral and regression checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub spec: SynthSpec,
    /// The latent driver, one value per row.
    pub driver: Vec<f64>,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(RawSeries, GroundTruth)> {
    if spec.length < MIN_SYNTH_LENGTH {
        return Err(Error::Config(format!(
            "synth length {} is below the minimum of {MIN_SYNTH_LENGTH}",
            spec.length
        )));
    }
    if spec.components.iter().any(|c| !(c.period > 0.0)) {
        return Err(Error::Config("synth component periods must be positive".into()));
    }
    let sigma_ok = |s: f64| s >= 0.0 && s.is_finite();
    if !(sigma_ok(spec.noise_sigma) && sigma_ok(spec.driver_sigma) && sigma_ok(spec.exo_noise)) {
        return Err(Error::Config("synth noise levels must be finite and non-negative".into()));
    }
    if spec.driver_ar.abs() >= 1.0 {
        return Err(Error::Config(format!("driver_ar {} must lie in (-1, 1)", spec.driver_ar)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |sigma: f64| if sigma == 0.0 { 0.0 } else { sigma * std_normal.sample(&mut rng) };

    // The driver runs `lead` steps past the end and starts two steps early
    // so every exogenous row has a value.
    const LAG: usize = 2;
    let total = spec.length + spec.lead + LAG;
    let stationary = spec.driver_sigma / (1.0 - spec.driver_ar * spec.driver_ar).sqrt();
    let mut latent = Vec::with_capacity(total);
    let mut d = draw(stationary);
    for _ in 0..total {
        latent.push(d);
        d = spec.driver_ar * d + draw(spec.driver_sigma);
    }
    let driver: Vec<f64> = latent[LAG..LAG + spec.length].to_vec();

    let tau = std::f64::consts::TAU;
    let mut endo = Vec::with_capacity(spec.length);
    let mut exo = Vec::with_capacity(2 * spec.length);
    let mut timestamps = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let tf = t as f64;
        let seasonal: f64 = spec
            .components
            .iter()
            .map(|c| c.amplitude * (tau * tf / c.period + c.phase).sin())
            .sum();
        endo.push(spec.level + spec.trend * tf + seasonal + spec.driver_gain * driver[t] + draw(spec.noise_sigma));
        exo.push(latent[LAG + t + spec.lead] + draw(spec.exo_noise));
        exo.push(latent[t] + draw(spec.exo_noise));
        timestamps.push(spec.start + TimeDelta::hours(t as i64));
    }
    let series = RawSeries::from_rows(
        timestamps,
        vec!["co2_mass".into()],
        vec!["driver_lead".into(), "driver_lag".into()],
        endo,
        exo,
    )?;
    let truth = GroundTruth {
        periods: spec.components.iter().map(|c| c.period).collect(),
        amplitudes: spec.components.iter().map(|c| c.amplitude).collect(),
        phases: spec.components.iter().map(|c| c.phase).collect(),
        spec: spec.clone(),
        driver,
    };
    Ok((series, truth))
}
