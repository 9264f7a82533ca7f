use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ToyMllmConfig;
use crate::quantizer::check_bits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    /// No rotation and no online transform.
    Identity,
    Hadamard,
    /// Hadamard with seeded random signs; disables the split path.
    Randomized,
}

/// Quantization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits_w: u8,
    pub bits_a: u8,
    /// Weight group size along the input dimension; per output channel when absent.
    pub weight_group_size: Option<usize>,
    pub act_symmetric: bool,
    pub rms: bool,
    /// Bit-width of the split row; defaults to `bits_w`.
    pub split_row_bits: Option<u8>,
    pub aifs: bool,
    pub rotation: RotationKind,
    pub rotation_seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits_w: 8,
            bits_a: 8,
            weight_group_size: None,
            act_symmetric: true,
            rms: true,
            split_row_bits: None,
            aifs: true,
            rotation: RotationKind::Hadamard,
            rotation_seed: 0,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits_w)?;
        check_bits(self.bits_a)?;
        if let Some(b) = self.split_row_bits {
            check_bits(b)?;
        }
        if self.weight_group_size == Some(0) {
            return Err(Error::Config("weight_group_size must be positive".into()));
        }
        Ok(())
    }

    /// Whether the split path will actually be built.
    pub fn rms_active(&self) -> bool {
        self.rms && self.rotation == RotationKind::Hadamard
    }
}

/// Contents of a config file: a `[model]` table and a `[quant]` table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ToyMllmConfig,
    pub quant: QuantConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.quant.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}
