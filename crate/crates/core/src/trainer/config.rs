use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::BranchConditioning;
use crate::error::{Error, Result};

/// What a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    /// The control branch and token reduction, against a frozen backbone.
    #[default]
    Branch,
    /// The text-conditioned backbone itself, with the unmasked loss.
    Backbone,
}

/// A training run, read from a TOML key/value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub target: TrainTarget,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Dataset directory.
    pub dataset: PathBuf,
    /// Checkpoint providing the backbone and encoders. A fresh backbone is
    /// built from `seed` when absent.
    pub backbone: Option<PathBuf>,
    /// Receives `checkpoint.bin` and `metrics.jsonl`.
    pub out_dir: PathBuf,
    /// Use at most this many training-split samples.
    pub max_samples: Option<usize>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    pub checkpoint_every: u64,
    /// Probability of replacing each condition by its unset value.
    pub cond_dropout: f64,
    pub no_feature_mask: bool,
    pub no_loss_mask: bool,
    pub global_embedding: bool,
    /// Condition the branch on the prompt instead of style images.
    pub text_branch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target: TrainTarget::Branch,
            epochs: 2,
            batch_size: 4,
            grad_accum: 4,
            learning_rate: 1e-4,
            seed: 0,
            dataset: PathBuf::from("data"),
            backbone: None,
            out_dir: PathBuf::from("runs/default"),
            max_samples: None,
            max_steps: None,
            checkpoint_every: 25,
            cond_dropout: 0.1,
            no_feature_mask: false,
            no_loss_mask: false,
            global_embedding: false,
            text_branch: false,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn conditioning(&self) -> BranchConditioning {
        if self.text_branch {
            BranchConditioning::Text
        } else if self.global_embedding {
            BranchConditioning::Global
        } else {
            BranchConditioning::Local
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::validation("batch_size", "batch_size and grad_accum must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::validation("cond_dropout", "must be in [0, 1)"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::validation("checkpoint_every", "must be at least 1"));
        }
        if self.text_branch && self.global_embedding {
            return Err(Error::validation("text_branch", "cannot be combined with global_embedding"));
        }
        let ablation = self.no_feature_mask || self.no_loss_mask || self.global_embedding || self.text_branch;
        if self.target == TrainTarget::Backbone && ablation {
            return Err(Error::validation("target", "ablation flags apply to branch training only"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_effective_batch_16() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.grad_accum), (2, 4, 4));
        assert_eq!(c.effective_batch(), 16);
        assert_eq!(c.conditioning(), BranchConditioning::Local);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig { no_loss_mask: true, max_steps: Some(7), ..Default::default() };
        let back: TrainConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = toml::from_str("epochs = 3\ntext_branch = true\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.conditioning(), BranchConditioning::Text);
        assert!(toml::from_str::<TrainConfig>("epoch = 3\n").is_err());
    }

    #[test]
    fn invalid_combinations() {
        let bad = TrainConfig { text_branch: true, global_embedding: true, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { target: TrainTarget::Backbone, no_loss_mask: true, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Validation { field, .. }) if field == "batch_size"));
    }
}
