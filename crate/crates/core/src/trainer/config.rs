use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approximator::NeuralConfig;
use crate::error::{ensure, Result};
use crate::losses::LossConfig;
use crate::optim::{AdamConfig, NoamConfig};
use crate::prior::EncoderFitConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of bridge steps `T`.
    pub steps: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    /// Token budget per packed batch.
    pub batch_size_tokens: usize,
    pub adam: AdamConfig,
    pub noam: NoamConfig,
    pub grad_clip: f64,
    pub seed: u64,
    /// Fit the prior encoder up front and keep it fixed. When false the
    /// encoder starts untrained and is updated alongside the bridge.
    pub freeze_prior: bool,
    /// Steps of unconditioned base training before the base is frozen and
    /// only the conditioning path trains. Zero trains everything jointly.
    pub base_pretrain_steps: u64,
    /// Keep the conditioning output layers at zero on initialization.
    pub zero_init_conditioning: bool,
    /// Range of the uniform init used when `zero_init_conditioning` is off.
    pub conditioning_init_scale: f64,
    /// Write the last checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Validate every this many steps (0: only at the start and the end).
    pub eval_every: u64,
    /// Evaluate validation loss on at most this many examples.
    pub valid_limit: Option<usize>,
    pub model: NeuralConfig,
    pub encoder: EncoderFitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            epochs: 10,
            max_steps: None,
            batch_size_tokens: 6000,
            adam: AdamConfig::default(),
            noam: NoamConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            freeze_prior: true,
            base_pretrain_steps: 0,
            zero_init_conditioning: true,
            conditioning_init_scale: 0.1,
            checkpoint_every: 0,
            eval_every: 0,
            valid_limit: None,
            model: NeuralConfig::default(),
            encoder: EncoderFitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 2, "the bridge needs at least 2 steps, got {}", self.steps);
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size_tokens >= 1, "batch_size_tokens must be positive");
        ensure!(self.grad_clip > 0.0, "grad_clip must be positive");
        ensure!(
            self.conditioning_init_scale >= 0.0,
            "conditioning_init_scale must be non-negative"
        );
        self.noam.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Fails unless every example fits in one batch.
    pub fn check_lengths(&self, max_len: usize) -> Result<()> {
        ensure!(
            self.batch_size_tokens >= max_len,
            "batch_size_tokens {} is below the longest sequence ({max_len})",
            self.batch_size_tokens
        );
        Ok(())
    }
}

/// Hex SHA-256 of the settings that determine a training trajectory.
/// Run-length and reporting knobs are excluded so a run can be extended
/// from its checkpoint.
pub fn config_fingerprint(train: &TrainConfig, loss: &LossConfig) -> String {
    let canonical = TrainConfig {
        epochs: 0,
        max_steps: None,
        checkpoint_every: 0,
        eval_every: 0,
        valid_limit: None,
        ..train.clone()
    };
    let text = serde_json::to_string(&(canonical, loss)).expect("config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_run_length() {
        let a = TrainConfig::default();
        let loss = LossConfig::default();
        let b = TrainConfig {
            epochs: 99,
            max_steps: Some(5),
            ..a.clone()
        };
        assert_eq!(config_fingerprint(&a, &loss), config_fingerprint(&b, &loss));
        let c = TrainConfig { seed: 1, ..a.clone() };
        assert_ne!(config_fingerprint(&a, &loss), config_fingerprint(&c, &loss));
        assert_eq!(config_fingerprint(&a, &loss).len(), 64);
    }

    #[test]
    fn budget_check() {
        let c = TrainConfig {
            batch_size_tokens: 10,
            ..Default::default()
        };
        assert!(c.check_lengths(10).is_ok());
        assert!(c.check_lengths(11).is_err());
    }
}
