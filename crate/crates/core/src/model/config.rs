use serde::{Deserialize, Serialize};

use crate::aifs::DEFAULT_THETA_BASE;
use crate::error::{Error, Result};

/// Shape and seeding of the toy multimodal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyMllmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Pre-LN vision transformer blocks.
    pub vision_blocks: usize,
    /// RMSNorm + rotary LLM blocks.
    pub llm_blocks: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
    /// Magnitude of the per-column mean added to vision down-projection weights.
    pub vision_weight_mean_bias: f64,
    pub rope_theta: f64,
    pub norm_eps: f64,
}

impl Default for ToyMllmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            vision_blocks: 2,
            llm_blocks: 2,
            mlp_ratio: 4,
            seed: 0,
            vision_weight_mean_bias: 0.05,
            rope_theta: DEFAULT_THETA_BASE,
            norm_eps: 1e-6,
        }
    }
}

impl ToyMllmConfig {
    pub fn d_ff(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v > 0 && v.is_power_of_two();
        if !pow2(self.d_model) {
            return Err(Error::Config(format!(
                "d_model {} must be a power of two",
                self.d_model
            )));
        }
        if !pow2(self.d_ff()) {
            return Err(Error::Config(format!(
                "d_model * mlp_ratio = {} must be a power of two",
                self.d_ff()
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(
                "head dimension must be even for rotary embeddings".into(),
            ));
        }
        if [self.norm_eps, self.rope_theta].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config("norm_eps and rope_theta must be positive".into()));
        }
        if !self.vision_weight_mean_bias.is_finite() {
            return Err(Error::Config("vision_weight_mean_bias must be finite".into()));
        }
        Ok(())
    }
}
