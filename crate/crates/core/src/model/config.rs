use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temporal aggregation turning per-step exogenous projections into one
/// token per variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExoAggregation {
    Mean,
    /// Learned score per lookback step, softmax over time, weighted sum.
    AttentionPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Concatenate along features, two-layer MLP back to `d_model`.
    ConcatMlp,
    /// `g ⊙ time + (1 - g) ⊙ freq` with `g = sigmoid([time ∥ freq] W + b)`.
    SigmoidGate,
}

/// How the masked exogenous pass enters the objective when robust training
/// is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustObjective {
    /// Prediction loss on the clean pass plus `lambda` times the squared
    /// distance between clean and masked predictions.
    Consistency,
    /// Masking as plain augmentation: prediction loss on the masked pass only.
    MaskOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Lookback steps per window.
    pub lookback: usize,
    pub d_endo: usize,
    pub d_exo: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_len: usize,
    /// Consistency weight.
    pub lambda: f64,
    /// Probability that a masked exogenous entry is dropped.
    pub mask_prob: f64,
    pub freq_branch: bool,
    pub robust_training: bool,
    pub robust_objective: RobustObjective,
    pub exo_agg: ExoAggregation,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 12,
            d_endo: 1,
            d_exo: 0,
            d_model: 32,
            layers: 2,
            heads: 4,
            patch_len: 4,
            lambda: 0.1,
            mask_prob: 0.3,
            freq_branch: true,
            robust_training: true,
            robust_objective: RobustObjective::Consistency,
            exo_agg: ExoAggregation::Mean,
            fusion: Fusion::ConcatMlp,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_len == 0 || self.lookback == 0 || self.lookback % self.patch_len != 0 {
            return fail(format!(
                "model.lookback ({}) must be a positive multiple of model.patch_len ({})",
                self.lookback, self.patch_len
            ));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "model.d_model ({}) must be a positive multiple of model.heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.d_endo == 0 {
            return fail("model.d_endo must be at least 1".into());
        }
        if self.layers == 0 {
            return fail("model.layers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return fail(format!("model.mask_prob ({}) must lie in [0, 1]", self.mask_prob));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("model.lambda ({}) must be finite and >= 0", self.lambda));
        }
        Ok(())
    }

    /// Patch tokens per window.
    pub fn patches(&self) -> usize {
        self.lookback / self.patch_len
    }

    /// Patch tokens plus the global token.
    pub fn tokens(&self) -> usize {
        1 + self.patches()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Whether a training step runs the masked exogenous pass.
    pub fn uses_masking(&self) -> bool {
        self.robust_training && self.d_exo > 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_have_four_tokens() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens(), 4);
        assert_eq!(c.head_dim(), 8);
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = [
            ModelConfig {
                patch_len: 5,
                ..Default::default()
            },
            ModelConfig {
                heads: 3,
                ..Default::default()
            },
            ModelConfig {
                mask_prob: 1.5,
                ..Default::default()
            },
            ModelConfig {
                lambda: -0.1,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn serde_uses_kebab_case_enums() {
        let json = serde_json::to_value(ModelConfig::default()).unwrap();
        assert_eq!(json["fusion"], "concat-mlp");
        assert_eq!(json["exo_agg"], "mean");
        let back: ModelConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, ModelConfig::default());
    }
}
