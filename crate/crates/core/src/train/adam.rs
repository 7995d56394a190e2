use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    config: AdamConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        let zeros = |t: &Tensor<S>| Tensor::zeros(t.shape());
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch(params.len(), grads.len()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (lr, eps, scale) = (S::of(c.lr), S::of(c.eps), S::of(scale));
        let (bc1, bc2) = (S::of(bc1), S::of(bc2));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] * scale;
                let mi = b1 * m.data()[i] + (S::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (S::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
