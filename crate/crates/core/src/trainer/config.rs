use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceSpec;
use crate::losses::{ContrastiveParams, MarginParams, MultisimParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLossKind {
    Multisimilarity,
    Margin,
    Contrastive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseLossConfig {
    pub kind: BaseLossKind,
    /// Feed class-name language similarities into multisimilarity mining
    /// and reweighting.
    pub language_adjusted: bool,
    pub multisim: MultisimParams,
    pub margin: MarginParams,
    pub contrastive: ContrastiveParams,
}

impl Default for BaseLossConfig {
    fn default() -> Self {
        Self {
            kind: BaseLossKind::Multisimilarity,
            language_adjusted: false,
            multisim: MultisimParams::default(),
            margin: MarginParams::default(),
            contrastive: ContrastiveParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub max_steps_down: usize,
    pub decay_factor: f64,
    pub patience: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            max_steps_down: 2,
            decay_factor: 0.1,
            patience: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub embed_dim: usize,
    /// Adds one hidden layer of width `2 × input` with a tanh nonlinearity.
    pub hidden_layer: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_layer: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_loss: BaseLossConfig,
    pub guidance: GuidanceSpec,
    pub head: HeadConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub samples_per_class: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub schedule: Schedule,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_loss: BaseLossConfig::default(),
            guidance: GuidanceSpec::default(),
            head: HeadConfig::default(),
            lr: 1e-5,
            weight_decay: 3e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 32,
            samples_per_class: 2,
            epochs: 50,
            seed: 0,
            val_fraction: 0.15,
            schedule: Schedule::default(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Defaults tuned for the small synthetic fixtures: a frozen-feature
    /// head needs a far larger step than a fine-tuned backbone.
    pub fn desk_scale() -> Self {
        Self {
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0
            || self.batch_size == 0
            || self.batch_size % self.samples_per_class != 0
        {
            return Err(Error::Config(format!(
                "batch_size ({}) must be a positive multiple of samples_per_class ({})",
                self.batch_size, self.samples_per_class
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0".into()));
        }
        if !(self.schedule.decay_factor > 0.0 && self.schedule.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0, 1]".into()));
        }
        if self.head.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        self.guidance.validate()?;
        self.base_loss.multisim.validate()?;
        self.base_loss.margin.validate()?;
        self.base_loss.contrastive.validate()?;
        Ok(())
    }
}
