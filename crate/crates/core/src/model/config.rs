use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: Vocab,
    pub max_seq: usize,
    /// Dropout on the attention and feedforward branches while training.
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            vocab: Vocab::default(),
            max_seq: 512,
            dropout: 0.0,
        }
    }
}

impl LmConfig {
    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq: 1024,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::invalid("model sizes must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) || !self.head_dim().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Infill,
    Prefix,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Infill => "infill",
            FusionMode::Prefix => "prefix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub d_expr: usize,
    pub d_jaw: usize,
    pub d_adapter_hidden: usize,
    pub n_cross_layers: usize,
    pub d_cross_ff: usize,
    /// Visual frames per prefix query.
    pub compression: usize,
    pub infill_ratio: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Prefix,
            d_expr: 128,
            d_jaw: 32,
            d_adapter_hidden: 128,
            n_cross_layers: 6,
            d_cross_ff: 128,
            compression: 5,
            infill_ratio: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn desk(mode: FusionMode) -> Self {
        Self {
            mode,
            d_expr: 32,
            d_jaw: 8,
            d_adapter_hidden: 64,
            n_cross_layers: 2,
            d_cross_ff: 64,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.compression == 0 || self.n_cross_layers == 0 {
            return Err(Error::invalid("compression and cross-attention depth must be positive"));
        }
        if !(0.0..=1.0).contains(&self.infill_ratio) {
            return Err(Error::invalid(format!("infill ratio {} outside [0, 1]", self.infill_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub lora: Option<LoraConfig>,
    pub fusion: Option<FusionConfig>,
    /// Hidden width of the emotion head's feedforward blocks.
    pub d_emotion: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            lora: None,
            fusion: None,
            d_emotion: 32,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        self.lm.check()?;
        if let Some(f) = &self.fusion {
            f.check()?;
        }
        if let Some(l) = &self.lora {
            if l.rank == 0 || !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::invalid("adapter rank must be positive and dropout in [0, 1)"));
            }
        }
        if self.d_emotion == 0 {
            return Err(Error::invalid("emotion head width must be positive"));
        }
        Ok(())
    }

    pub fn fusion_mode(&self) -> Option<FusionMode> {
        self.fusion.map(|f| f.mode)
    }
}
