use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{check_bits, ObserverKind, Scheme};

/// Bit width meaning "leave in floating point".
pub const FULL_PRECISION: u8 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObserverName {
    MinMax,
    Ema,
    Percentile,
}

impl FromStr for ObserverName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "minmax" => Ok(ObserverName::MinMax),
            "ema" => Ok(ObserverName::Ema),
            "percentile" => Ok(ObserverName::Percentile),
            _ => Err(format!("expected one of minmax|ema|percentile, got `{s}`")),
        }
    }
}

impl fmt::Display for ObserverName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObserverName::MinMax => "minmax",
            ObserverName::Ema => "ema",
            ObserverName::Percentile => "percentile",
        })
    }
}

/// Bit widths, schemes and calibration settings. Weights are always
/// quantized symmetrically per output channel; activations per tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub act_scheme: Scheme,
    pub observer: ObserverName,
    pub ema_momentum: f64,
    pub percentile: f64,
    pub calib_batches: usize,
    pub calib_batch_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            weight_bits: 8,
            act_bits: 8,
            act_scheme: Scheme::Symmetric,
            observer: ObserverName::Ema,
            ema_momentum: 0.9,
            percentile: 0.99,
            calib_batches: 16,
            calib_batch_size: 64,
        }
    }
}

impl QuantConfig {
    pub fn full_precision() -> Self {
        QuantConfig {
            weight_bits: FULL_PRECISION,
            act_bits: FULL_PRECISION,
            ..Default::default()
        }
    }

    pub fn w8a8() -> Self {
        Self::default()
    }

    pub fn with_bits(weight_bits: u8, act_bits: u8) -> Self {
        QuantConfig {
            weight_bits,
            act_bits,
            ..Default::default()
        }
    }

    /// `"WxAy"`.
    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight_bits, self.act_bits)
    }

    pub fn quantizes_weights(&self) -> bool {
        self.weight_bits != FULL_PRECISION
    }

    pub fn quantizes_activations(&self) -> bool {
        self.act_bits != FULL_PRECISION
    }

    pub fn observer_kind(&self) -> ObserverKind {
        match self.observer {
            ObserverName::MinMax => ObserverKind::MinMax,
            ObserverName::Ema => ObserverKind::Ema {
                momentum: self.ema_momentum,
            },
            ObserverName::Percentile => ObserverKind::Percentile { p: self.percentile },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_bits != FULL_PRECISION {
            check_bits(self.weight_bits).map_err(|e| Error::config("quant.weight_bits", e.to_string()))?;
        }
        if self.act_bits != 8 && self.act_bits != FULL_PRECISION {
            return Err(Error::config(
                "quant.act_bits",
                format!("activation bits must be 8 or 32, got {}", self.act_bits),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::config("quant.ema_momentum", "must lie in [0, 1)"));
        }
        if !(self.percentile > 0.5 && self.percentile <= 1.0) {
            return Err(Error::config("quant.percentile", "must lie in (0.5, 1]"));
        }
        if self.calib_batches == 0 || self.calib_batch_size == 0 {
            return Err(Error::config("quant.calib_batches", "calibration needs at least one sample"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(format!("expected adam|sgd, got `{s}`")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FromScratch,
    QatFinetune,
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "from_scratch" => Ok(TrainMode::FromScratch),
            "qat_finetune" => Ok(TrainMode::QatFinetune),
            _ => Err(format!("expected from_scratch|qat_finetune, got `{s}`")),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::FromScratch => "from_scratch",
            TrainMode::QatFinetune => "qat_finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// SGD momentum; Adam uses β₁ = 0.9, β₂ = 0.999.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// L2 coefficient on PACT clip levels, added to their gradient as
    /// `2·λ·α`. Zero disables it.
    pub alpha_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            mode: TrainMode::FromScratch,
            alpha_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: learning rate 2e-5.
    pub fn qat(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            lr: 2e-5,
            epochs,
            seed,
            mode: TrainMode::QatFinetune,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.alpha_decay >= 0.0) {
            return Err(Error::config("train.alpha_decay", "must be non-negative"));
        }
        Ok(())
    }
}
