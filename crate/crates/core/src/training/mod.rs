//! Loss assembly, optimizer, schedule, bucketed batching, and the two-phase
//! training driver.

mod batching;
mod driver;
mod loss;
mod optimizer;
mod schedule;

pub use batching::{bucket_batches, BucketItem};
pub use driver::{epoch_batches, split_train_val, train, LogLine, TrainOutcome};
pub use loss::{
    dual_mode_loss, dual_mode_loss_nodes, single_mode_loss, single_mode_loss_nodes,
    DualModeLossBreakdown, SegmentLosses,
};
pub use optimizer::Adam;
pub use schedule::lr_schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::DistillMode;
use crate::network::ModelConfig;
use crate::synthdata::Dataset;

/// Distillation loss weight chosen by the tuning sweep.
pub const DEFAULT_BETA: f64 = 5e-4;

/// The sweep grid around it, largest to smallest.
pub const BETA_SWEEP: [f64; 4] = [5e-3, 1e-3, 5e-4, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Streaming,
    Nonstreaming,
    Dual,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Streaming => write!(f, "streaming"),
            TrainMode::Nonstreaming => write!(f, "nonstreaming"),
            TrainMode::Dual => write!(f, "dual"),
        }
    }
}

/// Training configuration. JSON field names match exactly; `P` and `F` are
/// the past/future context counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    #[serde(rename = "P")]
    pub past: usize,
    #[serde(rename = "F")]
    pub future: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub peak_lr: f64,
    pub warmup_iters: u64,
    #[serde(default = "default_decay")]
    pub decay_rate: f64,
    pub max_iters_phase1: u64,
    pub max_iters_phase2: u64,
    pub bucket_boundaries: Vec<usize>,
    pub bucket_batch_frames: Vec<usize>,
    pub eval_every: u64,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub distill_mode: DistillMode,
    /// Mode for the no-context pre-training phase; defaults to `mode`.
    #[serde(default)]
    pub phase1_mode: Option<TrainMode>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_cap")]
    pub max_symbols_per_frame: usize,
    #[serde(default)]
    pub separator_frames: usize,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_decay() -> f64 {
    0.99998
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_cap() -> usize {
    10
}

impl TrainConfig {
    pub fn validate(&self, dataset: Option<&Dataset>) -> Result<()> {
        self.model.validate()?;
        if matches!(self.mode, TrainMode::Streaming) && self.future > 0 {
            return Err(Error::config(
                "student cannot see future utterances (streaming mode with F > 0)".to_string(),
            ));
        }
        if self.beta < 0.0 {
            return Err(Error::config("beta must be nonnegative".to_string()));
        }
        if self.bucket_batch_frames.len() != self.bucket_boundaries.len() + 1 {
            return Err(Error::config(format!(
                "need {} bucket budgets for {} boundaries, got {}",
                self.bucket_boundaries.len() + 1,
                self.bucket_boundaries.len(),
                self.bucket_batch_frames.len()
            )));
        }
        if self.bucket_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("bucket boundaries must be ascending".to_string()));
        }
        if self.bucket_batch_frames.iter().any(|&b| b == 0) {
            return Err(Error::config("bucket budgets must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must be in [0, 1)".to_string()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::config("max_symbols_per_frame must be >= 1".to_string()));
        }
        if let Some(data) = dataset {
            if data.feature_dim != self.model.feature_dim {
                return Err(Error::config(format!(
                    "dataset feature_dim {} != model feature_dim {}",
                    data.feature_dim, self.model.feature_dim
                )));
            }
            if data.vocab_size != self.model.vocab_size {
                return Err(Error::config(format!(
                    "dataset vocab_size {} != model vocab_size {}",
                    data.vocab_size, self.model.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Mode used for phase 1 (no-context pre-training).
    pub fn phase1_mode(&self) -> TrainMode {
        self.phase1_mode.unwrap_or(self.mode)
    }
}
