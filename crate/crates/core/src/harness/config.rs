use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cells::SampleMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;

/// Parameters that the auxiliary terms `ℓ_r + ℓ_c` update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxUpdates {
    /// Every parameter, following the gradient of `ℓ_total`.
    All,
    /// Only the summarizing-variable machinery; the rest learns from `ℓ_ll`.
    #[default]
    Summary,
}

/// Optimization and bookkeeping settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub loss: LossWeights,
    /// Write a numbered checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Compute validation perplexity every this many epochs (0: never).
    pub eval_every: usize,
    pub vocab_min_count: usize,
    pub shuffle: bool,
    /// How Gaussian variables are drawn during training.
    pub train_mode: SampleMode,
    pub aux_updates: AuxUpdates,
}

/// Clipping bound used when clipping is switched on without a value.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 100,
            batch_size: 128,
            grad_clip_norm: None,
            seed: 0,
            loss: LossWeights::default(),
            checkpoint_every: 0,
            eval_every: 1,
            vocab_min_count: 1,
            shuffle: true,
            train_mode: SampleMode::Sample,
            aux_updates: AuxUpdates::default(),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                v.push(format!("train.{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            v.push(format!("train.adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be at least 1".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                v.push(format!("train.grad_clip_norm must be positive, got {c}"));
            }
        }
        if !(self.loss.delta > 0.0) {
            v.push(format!("train.loss.delta must be positive, got {}", self.loss.delta));
        }
        if self.vocab_min_count == 0 {
            v.push("train.vocab_min_count must be at least 1".into());
        }
        v
    }
}

/// Named starting points for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size settings.
    Paper,
    /// Small model and long schedule for single-core experiments.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Invalid(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }
}

/// Model and training settings as one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig {
                model: ModelConfig {
                    d_embed: 64,
                    d_hidden: 64,
                    encoder_layers: 1,
                    vocab_size: 2000,
                    max_turns: 5,
                    max_tokens: 20,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    learning_rate: 3e-3,
                    max_epochs: 500,
                    batch_size: 4,
                    eval_every: 10,
                    ..TrainConfig::default()
                },
            },
        }
    }

    /// Overlays the keys present in `json` on `preset`; unknown keys are errors.
    pub fn from_json_over(json: &str, preset: Preset) -> Result<Self> {
        let overlay: Value = serde_json::from_str(json)?;
        let mut base = serde_json::to_value(ExperimentConfig::preset(preset))?;
        merge(&mut base, overlay);
        let cfg: ExperimentConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, preset: Preset) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json_over(&text, preset)
    }

    /// Every violated constraint, model fields first.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.model.violations().into_iter().map(|s| format!("model: {s}")).collect();
        v.extend(self.train.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
