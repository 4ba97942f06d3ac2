use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scheduler::{DECAY_FACTOR, DEFAULT_LEARNING_RATE, PATIENCE_DECAY, PATIENCE_STOP};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::{Variable, DEFAULT_LOGIT_EPSILON};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variable: Variable,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub patience_decay: u32,
    pub patience_stop: u32,
    /// Total epochs, counting epochs finished before a resume.
    pub budget_epochs: u64,
    /// Wall-clock limit for this invocation; 0 disables it.
    pub budget_hours: f64,
    /// Optimizer-step limit; 0 disables it.
    pub max_steps: u64,
    pub augment: bool,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub logit_epsilon: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variable: Variable::Temperature,
            batch_size: 32,
            learning_rate: DEFAULT_LEARNING_RATE,
            decay_factor: DECAY_FACTOR,
            patience_decay: PATIENCE_DECAY,
            patience_stop: PATIENCE_STOP,
            budget_epochs: 100,
            budget_hours: 0.0,
            max_steps: 0,
            augment: true,
            grad_clip: 0.0,
            logit_epsilon: DEFAULT_LOGIT_EPSILON,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if self.patience_decay == 0 || self.patience_stop == 0 {
            return bad("patience_decay and patience_stop must be at least 1".into());
        }
        if !(self.budget_hours >= 0.0 && self.budget_hours.is_finite()) {
            return bad(format!("budget_hours must be >= 0, got {}", self.budget_hours));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if !(self.logit_epsilon > 0.0 && self.logit_epsilon < 0.5) {
            return bad(format!("logit_epsilon must be in (0, 0.5), got {}", self.logit_epsilon));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything a run needs, as read from the TOML config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))
    }
}
