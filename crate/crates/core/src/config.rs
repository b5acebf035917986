//! Hyperparameters of the model and of optimization.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::AdamSettings;

pub const PREFIX_TOKEN_RANGE: (usize, usize) = (2, 32);
pub const INTENT_TOKEN_RANGE: (usize, usize) = (1, 5);
pub const INTENT_DIMS: [usize; 3] = [8, 16, 32];
pub const MASK_PROB_RANGE: (f64, f64) = (0.1, 0.8);

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Learnable prefix tokens steering the frozen encoder (k).
    pub prefix_tokens: usize,
    /// `<intent>` tokens appended to the sequence (m).
    pub intent_tokens: usize,
    /// Width of the frozen intent encoder (d_I).
    pub intent_dim: usize,
    /// Width of the reasoner (d).
    pub hidden_dim: usize,
    /// Dual-attention layers in the reasoner (L).
    pub layers: usize,
    /// Self-attention blocks of the backbone encoder.
    pub backbone_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Per-entry drop probability of the intent masks (p_mask).
    pub mask_prob: f64,
    /// InfoNCE temperature (τ).
    pub temperature: f64,
    /// Most recent items kept per sequence (n_max).
    pub max_len: usize,
    /// Width of the stand-alone self-attentive baseline.
    pub baseline_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prefix_tokens: 4,
            intent_tokens: 3,
            intent_dim: 16,
            hidden_dim: 64,
            layers: 2,
            backbone_layers: 2,
            heads: 2,
            dropout: 0.2,
            mask_prob: 0.3,
            temperature: 0.1,
            max_len: 50,
            baseline_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: usize, (lo, hi): (usize, usize)| (lo..=hi).contains(&v);
        if !in_range(self.prefix_tokens, PREFIX_TOKEN_RANGE) {
            return Err(Error::Config(format!(
                "prefix_tokens = {} outside {:?}",
                self.prefix_tokens, PREFIX_TOKEN_RANGE
            )));
        }
        if !in_range(self.intent_tokens, INTENT_TOKEN_RANGE) {
            return Err(Error::Config(format!(
                "intent_tokens = {} outside {:?}",
                self.intent_tokens, INTENT_TOKEN_RANGE
            )));
        }
        if !INTENT_DIMS.contains(&self.intent_dim) {
            return Err(Error::Config(format!(
                "intent_dim = {} must be one of {INTENT_DIMS:?}",
                self.intent_dim
            )));
        }
        if self.layers == 0 || self.backbone_layers == 0 {
            return Err(Error::Config("layer counts must be at least 1".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be at least 1".into()));
        }
        for (name, dim) in [
            ("hidden_dim", self.hidden_dim),
            ("intent_dim", self.intent_dim),
            ("baseline_dim", self.baseline_dim),
        ] {
            if dim == 0 || dim % self.heads != 0 {
                return Err(Error::Config(format!(
                    "{name} = {dim} is not a positive multiple of heads = {}",
                    self.heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout = {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob = {} outside [0, 1)", self.mask_prob)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature = {} must be positive", self.temperature)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Optimization settings shared by backbone pretraining and model fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Weight of the intent-consistency loss (λ).
    pub icr_weight: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// When set, each epoch draws this many training cut points per user
    /// instead of visiting every prefix/next-item pair.
    pub samples_per_user: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            icr_weight: 0.1,
            max_epochs: 200,
            patience: 5,
            samples_per_user: None,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.icr_weight >= 0.0) {
            return Err(Error::Config(format!("icr_weight = {} must be >= 0", self.icr_weight)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.samples_per_user == Some(0) {
            return Err(Error::Config("samples_per_user must be at least 1 when set".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    hex::encode(Sha256::digest(&bytes))
}
