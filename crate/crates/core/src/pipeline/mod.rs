//! Offline task and auto-encoder training on source data, and the
//! per-subject test-time adaptation loop.

mod adapt;
mod batch;
mod train;

pub use adapt::{adapt_subject, initial_adaptors, subject_loss, AdaptOutcome, AdaptationReport, StopReason, StopRule};
pub use batch::{argmax_labels, predict, predict_slices, BundleValues, Prediction};
pub use train::{mean_reconstruction_error, train_autoencoders, train_task, AeTrainReport, TaskTrainReport};

use crate::error::{Error, Result};
use crate::nn::{ImageAdaptorMode, TaskKind};

/// Hyperparameters shared by the three procedures.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub kind: TaskKind,
    /// Maximum task-network epochs.
    pub epochs: usize,
    pub ae_epochs: usize,
    pub batch_size: usize,
    /// Adam step size of offline training.
    pub lr: f64,
    /// Adam step size of test-time adaptation.
    pub adapt_lr: f64,
    pub lambda_orth: f64,
    pub max_adapt_iters: usize,
    pub improvement: f64,
    /// Epochs without validation improvement before task training stops.
    pub patience: usize,
    pub power_iters: usize,
    pub image_adaptor: ImageAdaptorMode,
    /// Kaiming-normal draws of the adaptors scored by L_A before adapting;
    /// the lowest-loss draw starts the loop.
    pub init_candidates: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            epochs: 50,
            ae_epochs: 20,
            batch_size: 2,
            lr: 1e-3,
            adapt_lr: 1e-3,
            lambda_orth: match kind {
                TaskKind::Segmentation => 1.0,
                TaskKind::Synthesis => 5.0,
            },
            max_adapt_iters: 5,
            improvement: 0.95,
            patience: 10,
            power_iters: crate::losses::DEFAULT_POWER_ITERS,
            image_adaptor: ImageAdaptorMode::Pointwise,
            init_candidates: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.improvement > 0.0 && self.improvement < 1.0) {
            return Err(Error::Config(format!("improvement factor must lie in (0, 1), got {}", self.improvement)));
        }
        for (name, lr) in [("lr", self.lr), ("adapt_lr", self.adapt_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {lr}")));
            }
        }
        if !(self.lambda_orth >= 0.0 && self.lambda_orth.is_finite()) {
            return Err(Error::Config(format!("lambda_orth must be finite and ≥ 0, got {}", self.lambda_orth)));
        }
        if self.max_adapt_iters == 0 || self.power_iters == 0 || self.init_candidates == 0 {
            return Err(Error::Config("max_adapt_iters, power_iters and init_candidates must be ≥ 1".into()));
        }
        Ok(())
    }
}
