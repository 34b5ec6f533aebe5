use crate::episodes::EpisodeMode;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs (1-based) after which the rate is multiplied by `lr_decay_factor`.
    /// Entries beyond `epochs` never trigger.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_episodes: usize,
    pub val_episodes: usize,
    pub seed: u64,
    pub mode: EpisodeMode,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            epochs: 50,
            lr_decay_epochs: vec![15, 30, 40],
            lr_decay_factor: 0.1,
            batch_episodes: 8,
            val_episodes: 100,
            seed: 0,
            mode: EpisodeMode::Transductive,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::Config("lr_decay_factor must be positive".into()));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_decay_epochs must be strictly increasing".into()));
        }
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e < epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}
