//! Toy per-cell detector, three-level domain discriminators, the hard and
//! soft-label adversarial losses, and the pretrain / fine-tune loops.
//!
//! The min-max objective
//!
//! ```text
//! min_F max_D  L_sup + sum_l lambda_l * L_adv_l
//! L_adv_l = d * log D_l(q_l) + (1 - d) * log(1 - D_l(q_l))
//! ```
//!
//! is realized in a single backward pass: the trainer minimizes
//! `L_sup - sum_l lambda_l * L_adv_l` (binary cross-entropy for the
//! discriminators) and the queries reach the discriminators through a
//! gradient reversal, so the backbone receives the opposite sign.

mod eval;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamWConfig, AutodiffError, CheckpointError, Tape, Tensor, Var};
use crate::dataset::{Annotation, BenchmarkConfig, DatasetError};
use crate::imaging::ImageError;
use crate::schedule::{BlendSchedule, ScheduleError};

pub use eval::{average_precision, evaluate, EvalReport};
pub use model::{DetectorModel, DiscriminatorBank, Level, ModelConfig, DISC_CLAMP, LEVELS};
pub use train::{
    finetune, metrics_csv, pretrain, step_gradients, train_source_only, train_step, EpochMetrics,
    Learner, Objective, RunOptions, RunReport, StepGradients, StepLosses, TrainObserver,
    BEST_CHECKPOINT, FINAL_CHECKPOINT, METRICS_FILE, PRETRAIN_CHECKPOINT, RESUME_CHECKPOINT,
};

#[derive(Debug, Error)]
pub enum AdaptationError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("annotation ({row}, {col}, class {class_id}) does not fit a {cells}-cell grid with {classes} classes")]
    BadAnnotation {
        row: usize,
        col: usize,
        class_id: usize,
        cells: usize,
        classes: usize,
    },
    #[error("domain label must be 0 or 1 for the hard loss, got {0}")]
    HardLabel(f64),
    #[error("soft domain label must be in [0, 1], got {0}")]
    SoftLabel(f64),
    #[error("non-finite {term} loss ({value}) at iteration {iteration}")]
    NonFiniteLoss {
        term: &'static str,
        value: f64,
        iteration: usize,
    },
    #[error("samples were built with delta {sample}, step was given {given}")]
    DeltaMismatch { sample: f64, given: f64 },
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error("no class has a positive cell in the evaluation set")]
    NoPositives,
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Binary labels: blended images count as source, raw targets as target.
    Hard,
    /// Every mixed sample carries the soft label `delta`.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_sp: f64,
    pub lambda_ch: f64,
    pub lambda_ins: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sp: 0.1,
            lambda_ch: 0.1,
            lambda_ins: 0.1,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        lambda_sp: 0.0,
        lambda_ch: 0.0,
        lambda_ins: 0.0,
    };

    pub fn get(&self, level: Level) -> f64 {
        match level {
            Level::Space => self.lambda_sp,
            Level::Channel => self.lambda_ch,
            Level::Instance => self.lambda_ins,
        }
    }

    pub fn validate(&self) -> Result<(), AdaptationError> {
        for l in LEVELS {
            let v = self.get(l);
            if !(v.is_finite() && v >= 0.0) {
                return Err(AdaptationError::Config(format!(
                    "lambda_{} must be finite and >= 0, got {v}",
                    l.tag()
                )));
            }
        }
        Ok(())
    }
}

/// Everything that defines one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Drives benchmark generation, initialization and sampling.
    pub seed: u64,
    pub benchmark: BenchmarkConfig,
    pub model: ModelConfig,
    /// Fine-tune length and, unless `static_delta` is set, the mixing weight.
    pub schedule: BlendSchedule,
    /// Fixed mixing weight replacing the schedule.
    pub static_delta: Option<f64>,
    pub adversarial_mode: AdversarialMode,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub pretrain_iterations: usize,
    pub iterations_per_epoch: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            benchmark: BenchmarkConfig::default(),
            model: ModelConfig::default(),
            schedule: BlendSchedule {
                alpha: 20.0,
                beta: 0.9,
                total_iterations: 3000,
            },
            static_delta: None,
            adversarial_mode: AdversarialMode::Mixed,
            weights: LossWeights::default(),
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            pretrain_iterations: 1500,
            iterations_per_epoch: 200,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<(), AdaptationError> {
        self.schedule.validate()?;
        self.benchmark.layout.validate()?;
        self.weights.validate()?;
        if let Some(d) = self.static_delta {
            if !(0.0..=1.0).contains(&d) {
                return Err(AdaptationError::Config(format!(
                    "static_delta must be in [0, 1], got {d}"
                )));
            }
        }
        if self.iterations_per_epoch == 0 {
            return Err(AdaptationError::Config(
                "iterations_per_epoch must be positive".into(),
            ));
        }
        let o = &self.optimizer;
        let ok = o.lr.is_finite()
            && o.lr > 0.0
            && o.weight_decay.is_finite()
            && o.weight_decay >= 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps.is_finite()
            && o.eps >= 0.0;
        if !ok {
            return Err(AdaptationError::Config(format!(
                "invalid optimizer settings {o:?}"
            )));
        }
        Ok(())
    }

    /// Mixing weight in force at a 0-based fine-tune iteration.
    pub fn delta_at(&self, iteration: usize) -> Result<f64, AdaptationError> {
        match self.static_delta {
            Some(d) => Ok(d),
            None => Ok(self.schedule.at(iteration)?.delta),
        }
    }
}

fn check_soft(d: f64) -> Result<(), AdaptationError> {
    if !(0.0..=1.0).contains(&d) {
        return Err(AdaptationError::SoftLabel(d));
    }
    Ok(())
}

fn log_likelihood(d: f64, disc_output: f64) -> f64 {
    let p = disc_output.clamp(DISC_CLAMP, 1.0 - DISC_CLAMP);
    d * p.ln() + (1.0 - d) * (-p).ln_1p()
}

/// `d log D + (1 - d) log(1 - D)` for a binary domain label. Never positive.
pub fn adversarial_loss_hard(d: f64, disc_output: f64) -> Result<f64, AdaptationError> {
    if d != 0.0 && d != 1.0 {
        return Err(AdaptationError::HardLabel(d));
    }
    Ok(log_likelihood(d, disc_output))
}

/// The same form with a soft label; maximized over `D` at `D = d_soft`.
pub fn adversarial_loss_mixed(d_soft: f64, disc_output: f64) -> Result<f64, AdaptationError> {
    check_soft(d_soft)?;
    Ok(log_likelihood(d_soft, disc_output))
}

/// Differentiable counterpart of [`adversarial_loss_mixed`] on a clamped
/// `1 x 1` discriminator output.
pub(crate) fn adversarial_loss_var<'t>(
    tape: &'t Tape,
    d: f64,
    disc_output: Var<'t>,
) -> Result<Var<'t>, AdaptationError> {
    check_soft(d)?;
    let one = tape.leaf(Tensor::scalar(1.0));
    let log_p = disc_output.log()?;
    let log_q = one.sub(&disc_output)?.log()?;
    Ok(log_p.scale(d).add(&log_q.scale(1.0 - d))?)
}

/// `l_sup + lambda_sp * l_sp + lambda_ch * l_ch + lambda_ins * l_ins`.
pub fn total_loss<'t>(
    l_sup: Var<'t>,
    l_sp: Var<'t>,
    l_ch: Var<'t>,
    l_ins: Var<'t>,
    weights: &LossWeights,
) -> Result<Var<'t>, AdaptationError> {
    Ok(l_sup
        .add(&l_sp.scale(weights.lambda_sp))?
        .add(&l_ch.scale(weights.lambda_ch))?
        .add(&l_ins.scale(weights.lambda_ins))?)
}

/// Mean per-cell cross-entropy. Cells without an annotation are background
/// (the last logit column).
pub fn supervised_loss<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    grid_size: usize,
    annotations: &[Annotation],
) -> Result<Var<'t>, AdaptationError> {
    let (cells, k) = logits.shape();
    if cells != grid_size * grid_size || k < 2 {
        return Err(AdaptationError::Config(format!(
            "logits {:?} do not match a {grid_size}x{grid_size} grid",
            logits.shape()
        )));
    }
    let targets = cell_targets(grid_size, k - 1, annotations)?;
    let mut onehot = vec![0.0; cells * k];
    for (cell, &t) in targets.iter().enumerate() {
        onehot[cell * k + t] = 1.0;
    }
    let onehot = tape.leaf(Tensor::from_vec(cells, k, onehot)?);
    Ok(logits
        .log_softmax()
        .mul(&onehot)?
        .sum()
        .scale(-1.0 / cells as f64))
}

/// Class index per cell, `num_classes` for background.
pub fn cell_targets(
    grid_size: usize,
    num_classes: usize,
    annotations: &[Annotation],
) -> Result<Vec<usize>, AdaptationError> {
    let mut targets = vec![num_classes; grid_size * grid_size];
    for a in annotations {
        if a.cell_row >= grid_size || a.cell_col >= grid_size || a.class_id >= num_classes {
            return Err(AdaptationError::BadAnnotation {
                row: a.cell_row,
                col: a.cell_col,
                class_id: a.class_id,
                cells: grid_size * grid_size,
                classes: num_classes,
            });
        }
        targets[a.cell_row * grid_size + a.cell_col] = a.class_id;
    }
    Ok(targets)
}
