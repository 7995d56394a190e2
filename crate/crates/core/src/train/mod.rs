//! Robust training: exogenous masking, consistency regularization and the
//! mini-batch loop.

mod adam;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{FTimeXer, RobustObjective};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

/// Which entries of the `T x d_x` exogenous block share one Bernoulli draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskGranularity {
    #[default]
    Entry,
    /// Whole exogenous columns (sensor dropout).
    Variable,
    /// Whole time steps across all exogenous columns.
    Timestep,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    /// Probability that a mask entry is zero.
    pub p: f64,
    pub granularity: MaskGranularity,
}

impl MaskSpec {
    pub fn new(p: f64, granularity: MaskGranularity) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("mask probability {p} outside [0, 1]")));
        }
        Ok(Self { p, granularity })
    }

    /// Draws a `rows x cols` keep-mask of ones and zeros.
    pub fn sample<S: Scalar>(&self, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor<S>> {
        let spec = Self::new(self.p, self.granularity)?;
        let mut keep = |_: usize| if rng.random::<f64>() < spec.p { S::zero() } else { S::one() };
        let data = match spec.granularity {
            MaskGranularity::Entry => (0..rows * cols).map(&mut keep).collect(),
            MaskGranularity::Variable => {
                let col: Vec<S> = (0..cols).map(&mut keep).collect();
                (0..rows * cols).map(|i| col[i % cols]).collect()
            }
            MaskGranularity::Timestep => {
                let row: Vec<S> = (0..rows).map(&mut keep).collect();
                (0..rows * cols).map(|i| row[i / cols.max(1)]).collect()
            }
        };
        Tensor::new([rows, cols], data)
    }
}

/// Zeroes exogenous entries with a freshly drawn mask; returns the masked
/// matrix and the mask.
pub fn apply_mask<S: Scalar>(
    x_exo: &Tensor<S>,
    spec: &MaskSpec,
    rng: &mut impl Rng,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (rows, cols) = x_exo.dims2()?;
    let mask = spec.sample(rows, cols, rng)?;
    Ok((hadamard(x_exo, &mask)?, mask))
}

fn hadamard<S: Scalar>(x: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
    if x.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "mask",
            lhs: x.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let data = x.data().iter().zip(mask.data()).map(|(a, m)| *a * *m).collect();
    Tensor::new(x.shape(), data)
}

fn batch_rows(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[0]
    } else {
        1
    }
}

/// Squared L2 distance between two predictions, averaged over the leading
/// (batch) axis. A rank-1 input counts as a single prediction.
pub fn consistency_loss<S: Scalar>(y_hat: &Var<S>, y_masked: &Var<S>) -> Result<Var<S>> {
    let d = y_hat.sub(y_masked)?;
    let n = batch_rows(d.shape());
    if n == 0 || d.value().is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(d.mul(&d)?.sum_all().scale(S::of(1.0 / n as f64)))
}

/// Mean of the element-wise loss between targets and predictions.
pub fn prediction_loss<S: Scalar>(y: &Var<S>, y_hat: &Var<S>, kind: LossKind) -> Result<Var<S>> {
    match kind {
        LossKind::Mse => y_hat.mse(y),
        LossKind::Mae => y_hat.mae(y),
    }
}

/// Loss values for one step. `total` is always `l_pred + lambda * l_cons`
/// evaluated in `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_pred: f64,
    pub l_cons: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub fn new(l_pred: f64, l_cons: f64, lambda: f64) -> Self {
        Self {
            l_pred,
            l_cons,
            total: l_pred + lambda * l_cons,
            lambda,
        }
    }
}

/// One supervised example: a lookback window and its next-step target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub x_endo: Tensor<S>,
    pub x_exo: Tensor<S>,
    pub y: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    /// Trailing share of the training windows held out for validation.
    pub val_frac: f64,
    pub loss: LossKind,
    pub mask_granularity: MaskGranularity,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            batch_size: 64,
            patience: 10,
            clip_norm: Some(1.0),
            val_frac: 0.1,
            loss: LossKind::Mse,
            mask_granularity: MaskGranularity::Entry,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return bad(format!("train.val_frac must be in [0, 1), got {}", self.val_frac));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return bad(format!("train.clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// Losses and parameter gradients for a batch at frozen parameters.
///
/// `mask` is the keep-mask applied to every window's exogenous block; it is
/// ignored unless the model trains robustly.
pub fn batch_gradients<S: Scalar>(
    model: &FTimeXer<S>,
    batch: &[&Sample<S>],
    kind: LossKind,
    mask: Option<&Tensor<S>>,
) -> Result<(LossBundle, Vec<Tensor<S>>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let cfg = model.config();
    let lambda = cfg.lambda;
    let masked = match mask {
        Some(m) if cfg.uses_masking() => Some(m),
        _ => None,
    };
    let inv_n = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor<S>> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut pred_sum, mut cons_sum) = (0.0, 0.0);

    for sample in batch {
        let tape = Tape::new();
        let b = model.bind(&tape, true);
        let y = tape.constant(sample.y.clone());
        let loss = match (masked, cfg.robust_objective) {
            (None, _) => {
                let y_hat = model.forward(&b, &sample.x_endo, &sample.x_exo)?;
                let lp = prediction_loss(&y, &y_hat, kind)?;
                pred_sum += lp.item()?.as_f64();
                lp.scale(S::of(inv_n))
            }
            (Some(m), RobustObjective::MaskOnly) => {
                let x = hadamard(&sample.x_exo, m)?;
                let y_hat = model.forward(&b, &sample.x_endo, &x)?;
                let lp = prediction_loss(&y, &y_hat, kind)?;
                pred_sum += lp.item()?.as_f64();
                lp.scale(S::of(inv_n))
            }
            (Some(m), RobustObjective::Consistency) => {
                let y_hat = model.forward(&b, &sample.x_endo, &sample.x_exo)?;
                let x = hadamard(&sample.x_exo, m)?;
                let y_masked = model.forward(&b, &sample.x_endo, &x)?;
                let lp = prediction_loss(&y, &y_hat, kind)?;
                let lc = consistency_loss(&y_hat, &y_masked)?;
                pred_sum += lp.item()?.as_f64();
                cons_sum += lc.item()?.as_f64();
                lp.add(&lc.scale(S::of(lambda)))?.scale(S::of(inv_n))
            }
        };
        let g = loss.backward()?;
        for (acc, var) in grads.iter_mut().zip(b.vars()) {
            if let Some(gv) = g.get(var) {
                for (a, v) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += *v;
                }
            }
        }
    }
    Ok((LossBundle::new(pred_sum * inv_n, cons_sum * inv_n, lambda), grads))
}

/// One optimizer update on `batch`. Draws one exogenous mask for the step
/// when the model trains robustly. `step` is only used for error reporting.
pub fn train_step<S: Scalar>(
    model: &mut FTimeXer<S>,
    optimizer: &mut Adam<S>,
    batch: &[&Sample<S>],
    cfg: &TrainConfig,
    mask_rng: &mut impl Rng,
    step: usize,
) -> Result<LossBundle> {
    let mask = if model.config().uses_masking() {
        let (rows, cols) = batch
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?
            .x_exo
            .dims2()?;
        let spec = MaskSpec::new(model.config().mask_prob, cfg.mask_granularity)?;
        Some(spec.sample::<S>(rows, cols, mask_rng)?)
    } else {
        None
    };
    let (losses, grads) = batch_gradients(model, batch, cfg.loss, mask.as_ref())?;
    let grads_finite = grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
    if !losses.total.is_finite() || !grads_finite {
        return Err(Error::Diverged { step });
    }
    optimizer.update(model.params_mut().tensors_mut(), &grads)?;
    Ok(losses)
}

/// Mean squared error of `model` over `samples`, with clean inputs.
pub fn mean_squared_error<S: Scalar>(model: &FTimeXer<S>, samples: &[Sample<S>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let y_hat = model.predict(&s.x_endo, &s.x_exo)?;
        for (p, t) in y_hat.iter().zip(s.y.data()) {
            let d = p.as_f64() - t.as_f64();
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_pred: f64,
    pub l_cons: f64,
    pub total: f64,
    /// `None` when no validation windows are held out.
    pub val_mse: Option<f64>,
    pub wall_ms: u64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome<S> {
    /// Parameters from the epoch with the lowest validation error (the last
    /// epoch when there is no validation set).
    pub model: FTimeXer<S>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Splits `samples` into leading training and trailing validation windows.
pub fn validation_split<S>(samples: &[Sample<S>], val_frac: f64) -> Result<(&[Sample<S>], &[Sample<S>])> {
    if samples.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let n_val = (samples.len() as f64 * val_frac).ceil() as usize;
    if n_val >= samples.len() {
        return Err(Error::Data(format!(
            "{} windows leave none for training after holding out {n_val} for validation",
            samples.len()
        )));
    }
    Ok(samples.split_at(samples.len() - n_val))
}

pub fn fit<S: Scalar>(model: FTimeXer<S>, samples: &[Sample<S>], cfg: &TrainConfig) -> Result<FitOutcome<S>> {
    fit_with(model, samples, cfg, |_| {})
}

/// Mini-batch training with a seeded shuffle, per-epoch validation and
/// early stopping. `on_epoch` sees each log record as it is produced.
pub fn fit_with<S: Scalar>(
    mut model: FTimeXer<S>,
    samples: &[Sample<S>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome<S>> {
    cfg.validate()?;
    model.config().validate()?;
    let (train, val) = validation_split(samples, cfg.val_frac)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(1);
    let mut optimizer = Adam::new(cfg.adam(), model.params().tensors());
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, FTimeXer<S>)> = None;
    let mut since_best = 0;
    let mut steps = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut lp, mut lc, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<S>> = chunk.iter().map(|&i| &train[i]).collect();
            let l = train_step(&mut model, &mut optimizer, &batch, cfg, &mut mask_rng, steps)?;
            steps += 1;
            let w = chunk.len() as f64 / train.len() as f64;
            lp += w * l.l_pred;
            lc += w * l.l_cons;
            total += w * l.total;
        }
        let val_mse = if val.is_empty() {
            None
        } else {
            Some(mean_squared_error(&model, val)?)
        };
        let record = EpochRecord {
            epoch,
            l_pred: lp,
            l_cons: lc,
            total,
            val_mse,
            wall_ms: started.elapsed().as_millis() as u64,
            seed: cfg.seed,
        };
        on_epoch(&record);
        log.push(record);

        let Some(score) = val_mse else {
            best = Some((f64::NAN, epoch, model.clone()));
            continue;
        };
        if !score.is_finite() {
            return Err(Error::Diverged { step: steps });
        }
        match &best {
            Some((b, _, _)) if score >= *b => since_best += 1,
            _ => {
                best = Some((score, epoch, model.clone()));
                since_best = 0;
            }
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    let (best_val, best_epoch, best_model) = best.unwrap_or((f64::NAN, 0, model));
    Ok(FitOutcome {
        model: best_model,
        log,
        best_epoch,
        best_val_mse: (!val.is_empty() && best_epoch > 0).then_some(best_val),
        steps,
        stopped_early,
    })
}
