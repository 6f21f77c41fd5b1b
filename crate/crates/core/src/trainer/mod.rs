//! Pre-training loops, fine-tuning and checkpoints.

mod checkpoint;
mod contrastive;
mod finetune;
mod supervised;

use serde::{Deserialize, Serialize};

use crate::augment::{derive_seed, AugmentSpec};
use crate::encoder::{Arch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::matcher::{Matcher, MatcherConfig, Similarity};
use crate::objectives::{check_tau, DEFAULT_TAU};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainMeta, FORMAT_VERSION};
pub use contrastive::{
    accumulated_gradient, bench_q, full_gradient, pretrain_cl, BenchRow, ClRun, ContrastiveState, EpochStats, StepStats,
};
pub use finetune::{finetune, FinetuneEpoch, FinetuneModel, FinetuneReport, HEAD_PREFIX};
pub use supervised::{continuous_gap, pretrain_sup, SupRun};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Cl,
    SupContinuous,
    SupDiscrete,
    Finetune,
}

/// Architecture choices shared by every mode. Input dimensions come from the
/// dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub hidden: usize,
    pub similarity: Similarity,
    pub target_normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Gin,
            layers: 3,
            hidden: 64,
            similarity: Similarity::Dot,
            target_normalize: false,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, node_dim: usize, edge_dim: usize) -> EncoderConfig {
        EncoderConfig {
            arch: self.arch,
            layers: self.layers,
            hidden: self.hidden,
            node_dim,
            edge_dim,
        }
    }

    pub fn matcher_config(&self, edge_dim: usize) -> MatcherConfig {
        MatcherConfig {
            hidden: self.hidden,
            edge_dim,
            similarity: self.similarity,
            target_normalize: self.target_normalize,
        }
    }

    pub fn build(&self, node_dim: usize, edge_dim: usize) -> Result<(Encoder, Matcher)> {
        Ok((
            Encoder::new(self.encoder_config(node_dim, edge_dim))?,
            Matcher::new(self.matcher_config(edge_dim))?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Source graphs per batch (`n`), or graph pairs per batch in the
    /// supervised modes.
    pub batch_size: usize,
    /// Anchors sampled per contrastive batch.
    pub q: usize,
    pub lr: f64,
    pub seed: u64,
    pub tau: f64,
    pub augment: AugmentSpec,
    /// Fine-tuning stops after this many epochs without a better
    /// validation AUC.
    pub patience: usize,
    /// Train only the prediction head during fine-tuning.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cl,
            epochs: 20,
            batch_size: 32,
            q: 4,
            lr: 1e-3,
            seed: 0,
            tau: DEFAULT_TAU,
            augment: AugmentSpec::default(),
            patience: 10,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.mode == Mode::Cl {
            check_tau(self.tau)?;
            if self.q == 0 || self.q > 2 * self.batch_size {
                return Err(Error::Config(format!(
                    "q = {} must lie in 1..={} for batch size {}",
                    self.q,
                    2 * self.batch_size,
                    self.batch_size
                )));
            }
        }
        self.augment.validate()
    }
}

/// Per-epoch seed shared by shuffling, augmentation and anchor sampling.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, epoch as u64, 0x5eed)
}
