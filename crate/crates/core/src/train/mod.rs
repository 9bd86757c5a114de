//! Adversarial training: data, optimizer, training loop, checkpoints and the
//! ablation driver.

mod ablation;
mod dataset;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use ablation::{run_ablation, AblationReport, AblationRow, Variant};
pub use dataset::{build_dataset, Dataset, RngState};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{Trainer, LOSS_LOG, CHECKPOINT_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Zero the phase-gradient input stream.
    pub no_unwrap: bool,
    /// Residual blocks in place of ConvNeXt blocks.
    pub no_convnext: bool,
    /// One STFT discriminator resolution and one mel-loss resolution.
    pub single_scale_disc: bool,
    /// Add direct log-magnitude and phase supervision.
    pub spectral_recon: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayUnit {
    #[default]
    Epoch,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sample_rate: u32,
    pub chunk_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub decay_every: DecayUnit,
    pub max_steps: u64,
    pub seed: u64,
    /// Adversarial and feature-matching terms are active from this step on.
    pub adversarial_start_step: u64,
    pub checkpoint_every: u64,
    /// Hash parameters around each optimizer sub-step to prove that the
    /// discriminator step leaves the generator untouched and vice versa.
    pub verify_isolation: bool,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sample_rate: 48_000,
            chunk_samples: 15_960,
            batch_size: 64,
            lr: 5e-5,
            beta1: 0.8,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            lr_decay: 0.999,
            decay_every: DecayUnit::Epoch,
            max_steps: 200_000,
            seed: 0,
            adversarial_start_step: 0,
            checkpoint_every: 1_000,
            verify_isolation: true,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    /// Reference settings at 24 kHz: the same chunk duration in samples.
    pub fn at_24khz() -> Self {
        Self {
            sample_rate: 24_000,
            chunk_samples: 7_980,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_samples == 0 || self.batch_size == 0 {
            bail!(Config, "train.chunk_samples and train.batch_size must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            bail!(Config, "train.lr_decay must be in (0, 1], got {}", self.lr_decay);
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bail!(Config, "train.lr must be positive, got {}", self.lr);
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bail!(Config, "train.{name} must be in [0, 1), got {b}");
            }
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            bail!(Config, "train.weight_decay must be >= 0 and train.adam_eps > 0");
        }
        Ok(())
    }
}

/// `lr * decay^epoch`.
pub fn lr_schedule(lr: f64, decay: f64, epoch: u64) -> f64 {
    lr * decay.powf(epoch as f64)
}
