use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{LossWeights, Modality, ModelConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub lambda_gen: f64,
    pub lambda_mlm: f64,
    pub lambda_rpp: f64,
    pub stage: Stage,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            weight_decay: 0.01,
            warmup_steps: 50,
            clip_norm: 1.0,
            batch_size: 16,
            total_steps: 1000,
            seed: 0,
            lambda_gen: 1.0,
            lambda_mlm: 1.0,
            lambda_rpp: 1.0,
            stage: Stage::Pretrain,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be > 0")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be >= 0")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        non_negative("weight_decay", self.weight_decay)?;
        non_negative("clip_norm", self.clip_norm)?;
        non_negative("lambda_gen", self.lambda_gen)?;
        non_negative("lambda_mlm", self.lambda_mlm)?;
        non_negative("lambda_rpp", self.lambda_rpp)?;
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            gen: self.lambda_gen,
            mlm: self.lambda_mlm,
            rpp: self.lambda_rpp,
        }
    }
}

/// Which modality the adversary perturbs at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalitySchedule {
    /// Text, object, scene, text, ...
    Cycle,
    Text,
    Object,
    Scene,
    All,
}

impl ModalitySchedule {
    pub fn at(self, step: u64) -> Modality {
        match self {
            ModalitySchedule::Cycle => {
                [Modality::Text, Modality::Object, Modality::Scene][(step % 3) as usize]
            }
            ModalitySchedule::Text => Modality::Text,
            ModalitySchedule::Object => Modality::Object,
            ModalitySchedule::Scene => Modality::Scene,
            ModalitySchedule::All => Modality::All,
        }
    }
}

/// Embedding-space adversary. `epsilon == 0` disables it entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub k_steps: usize,
    pub lambda_kl: f64,
    pub target_modality: ModalitySchedule,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            alpha: 1e-2,
            k_steps: 1,
            lambda_kl: 1.0,
            target_modality: ModalitySchedule::Cycle,
        }
    }
}

impl AdvConfig {
    pub fn disabled() -> Self {
        Self {
            epsilon: 0.0,
            lambda_kl: 0.0,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.epsilon > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be >= 0".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if self.k_steps == 0 {
            return Err(Error::Config("k_steps must be >= 1".into()));
        }
        if !(self.lambda_kl.is_finite() && self.lambda_kl >= 0.0) {
            return Err(Error::Config("lambda_kl must be >= 0".into()));
        }
        Ok(())
    }
}

/// One config file: `train`, `adv` and `model` sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub adv: AdvConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    /// Reads TOML for `.toml` paths, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.adv.validate()?;
        self.model.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
