//! Training progress and the dynamic mixing weight.
//!
//! The mixing weight ramps from 0 toward an upper bound `beta` along a
//! scaled logistic curve of the training progress:
//!
//! ```text
//! gamma = iteration / total_iterations            (clamped to [0, 1])
//! delta = (2 / (1 + exp(-alpha * gamma)) - 1) * beta
//! ```
//!
//! `delta` is used both as the pixel mixing weight and as the soft domain
//! label of every blended sample created at that iteration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("total_iterations must be at least 1")]
    ZeroTotalIterations,
    #[error("alpha must be finite and > 0, got {0}")]
    InvalidAlpha(f64),
    #[error("beta must be finite and in (0, 1], got {0}")]
    InvalidBeta(f64),
    #[error("gamma must be in [0, 1], got {0}")]
    GammaOutOfRange(f64),
    #[error("schedule curve needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

/// The `(alpha, beta, total_iterations)` triple governing the mixing weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendSchedule {
    /// Ramp rate. Larger values remove source information sooner.
    pub alpha: f64,
    /// Upper bound of the mixing weight.
    pub beta: f64,
    /// Number of optimizer steps the ramp is spread over.
    pub total_iterations: usize,
}

impl BlendSchedule {
    pub fn new(alpha: f64, beta: f64, total_iterations: usize) -> Result<Self, ScheduleError> {
        let schedule = Self {
            alpha,
            beta,
            total_iterations,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ScheduleError::InvalidAlpha(self.alpha));
        }
        if !(self.beta.is_finite() && self.beta > 0.0 && self.beta <= 1.0) {
            return Err(ScheduleError::InvalidBeta(self.beta));
        }
        if self.total_iterations == 0 {
            return Err(ScheduleError::ZeroTotalIterations);
        }
        Ok(())
    }

    /// Progress and mixing weight for a 0-based optimizer step.
    pub fn at(&self, current_iteration: usize) -> Result<TrainingProgress, ScheduleError> {
        let gamma = compute_gamma(current_iteration, self.total_iterations)?;
        let delta = compute_delta(gamma, self)?;
        Ok(TrainingProgress {
            current_iteration,
            gamma,
            delta,
        })
    }
}

/// Position within a run, with the mixing weight in force at that step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingProgress {
    pub current_iteration: usize,
    pub gamma: f64,
    pub delta: f64,
}

/// Fraction of training completed, saturating at 1.0 past the end.
pub fn compute_gamma(
    current_iteration: usize,
    total_iterations: usize,
) -> Result<f64, ScheduleError> {
    if total_iterations == 0 {
        return Err(ScheduleError::ZeroTotalIterations);
    }
    if current_iteration >= total_iterations {
        return Ok(1.0);
    }
    Ok(current_iteration as f64 / total_iterations as f64)
}

/// Dynamic mixing weight for progress `gamma`.
///
/// Exactly 0 at `gamma = 0` and below `beta` elsewhere, as long as
/// `alpha * gamma` stays under about 36 (past that the ramp rounds to 1 in
/// f64). Evaluated through `expm1` so small arguments keep full relative
/// precision.
pub fn compute_delta(gamma: f64, schedule: &BlendSchedule) -> Result<f64, ScheduleError> {
    schedule.validate()?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ScheduleError::GammaOutOfRange(gamma));
    }
    // 2 / (1 + e^-x) - 1 == (1 - e^-x) / (1 + e^-x)
    let em1 = (-schedule.alpha * gamma).exp_m1();
    let ramp = -em1 / (2.0 + em1);
    Ok(ramp * schedule.beta)
}

/// `samples` evenly spaced `(gamma, delta)` points over `[0, 1]`.
pub fn emit_schedule_curve(
    schedule: &BlendSchedule,
    samples: usize,
) -> Result<Vec<(f64, f64)>, ScheduleError> {
    schedule.validate()?;
    if samples < 2 {
        return Err(ScheduleError::TooFewSamples(samples));
    }
    let last = (samples - 1) as f64;
    (0..samples)
        .map(|i| {
            let gamma = if i + 1 == samples {
                1.0
            } else {
                i as f64 / last
            };
            compute_delta(gamma, schedule).map(|delta| (gamma, delta))
        })
        .collect()
}

/// Renders a curve as `gamma,delta` CSV with 17 significant digits.
pub fn curve_to_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("gamma,delta\n");
    for &(gamma, delta) in curve {
        let _ = writeln!(out, "{},{}", format_sig17(gamma), format_sig17(delta));
    }
    out
}

/// 17 significant digits in scientific notation, which round-trips any f64.
pub fn format_sig17(x: f64) -> String {
    format!("{x:.16e}")
}
