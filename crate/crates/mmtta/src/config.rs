//! Run configuration: hyperparameters, routing switches, and the seed.
//!
//! The JSON schema is strict: unknown keys are errors, not warnings, and the
//! full config is echoed verbatim into every run manifest and report.

use serde::{Deserialize, Serialize};

use crate::adam::DEFAULT_LEARNING_RATE;
use crate::error::{Error, Result};
use crate::fusion::{BalanceSign, DEFAULT_LAMBDA, DEFAULT_W_C, DEFAULT_W_G};
use crate::gaussian::DEFAULT_EPSILON_SHRINK;
use crate::rectify::DEFAULT_TAU;
use crate::streaming::DEFAULT_EMA_ALPHA;

/// Where batch responsibilities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponsibilitySource {
    /// Softmax of the source-head logits (the default).
    #[default]
    SourceLogits,
    /// The fused-perspective discriminant posterior.
    FusedPosterior,
}

/// Which posteriors feed the per-modality reliability discrepancies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnimodalPosteriorSource {
    /// Per-perspective discriminant posteriors (the default).
    #[default]
    Gda,
    /// Softmax of the frozen head applied to each uni-modal feature.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub batch_size: usize,
    /// Weight on the fused-perspective scores in the fused logits.
    pub lambda: f64,
    /// Weight on the contrastive rectification loss.
    pub w_c: f64,
    /// Weight on the prediction-alignment loss.
    pub w_g: f64,
    /// Weight on the confidence regularizer (1 = unweighted).
    pub w_ra: f64,
    /// Weight on the balance regularizer (1 = unweighted).
    pub w_bal: f64,
    /// EMA rate for parameter blending.
    pub alpha: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Diagonal shrinkage for estimated covariances.
    pub epsilon_shrink: f64,
    pub learning_rate: f64,
    /// Dimension of the encoded features (shared by all three perspectives).
    pub feature_dim: usize,
    /// Clean source draws used to fit the frozen head.
    pub source_samples: usize,
    pub responsibility_source: ResponsibilitySource,
    pub unimodal_posterior_source: UnimodalPosteriorSource,
    pub balance_sign: BalanceSign,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            batch_size: 16,
            lambda: DEFAULT_LAMBDA,
            w_c: DEFAULT_W_C,
            w_g: DEFAULT_W_G,
            w_ra: 1.0,
            w_bal: 1.0,
            alpha: DEFAULT_EMA_ALPHA,
            tau: DEFAULT_TAU,
            epsilon_shrink: DEFAULT_EPSILON_SHRINK,
            learning_rate: DEFAULT_LEARNING_RATE,
            feature_dim: 8,
            source_samples: 512,
            responsibility_source: ResponsibilitySource::default(),
            unimodal_posterior_source: UnimodalPosteriorSource::default(),
            balance_sign: BalanceSign::default(),
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(Error::Config { message });
        if self.batch_size == 0 {
            return fail("batch_size must be positive".to_string());
        }
        if self.lambda < 0.0 {
            return fail(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.tau <= 0.0 {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.epsilon_shrink <= 0.0 {
            return fail(format!(
                "epsilon_shrink must be positive, got {}",
                self.epsilon_shrink
            ));
        }
        if self.learning_rate <= 0.0 {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".to_string());
        }
        if self.source_samples == 0 {
            return fail("source_samples must be positive".to_string());
        }
        for (name, w) in [
            ("w_c", self.w_c),
            ("w_g", self.w_g),
            ("w_ra", self.w_ra),
            ("w_bal", self.w_bal),
        ] {
            if !w.is_finite() || w < 0.0 {
                return fail(format!("{name} must be a nonnegative finite weight, got {w}"));
            }
        }
        Ok(())
    }

    /// Parse from strict JSON and validate.
    pub fn from_json(json: &str) -> Result<Self> {
        let config: AdaptationConfig =
            serde_json::from_str(json).map_err(|e| Error::Config {
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }
}
