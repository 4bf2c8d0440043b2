//! Training-progress schedules and activated-parameter accounting.
//!
//! Progress is the fraction of the token budget consumed so far, not the
//! fraction of steps; with a batch-size ramp the two differ.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::error::{LabError, Result};

/// Per-layer activated-expert counts over training progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsitySchedule {
    /// Counts for the first `early_counts.len()` layers before the switch.
    pub early_counts: Vec<usize>,
    /// Target count for every other layer, and for all layers after the switch.
    pub default_count: usize,
    pub switch_fraction: f64,
}

impl Default for SparsitySchedule {
    fn default() -> Self {
        Self {
            early_counts: vec![8, 8, 6, 6, 4, 4, 2, 2],
            default_count: 1,
            switch_fraction: 0.9,
        }
    }
}

impl SparsitySchedule {
    /// Target sparsity everywhere from the first step.
    pub fn constant(count: usize) -> Self {
        Self {
            early_counts: Vec::new(),
            default_count: count,
            switch_fraction: 0.0,
        }
    }

    pub fn validate(&self, num_experts: usize) -> Result<()> {
        let ok = |c: usize| (1..=num_experts).contains(&c);
        if !ok(self.default_count) || !self.early_counts.iter().all(|&c| ok(c)) {
            return Err(LabError::Config(format!(
                "activated-expert counts must lie in [1, {num_experts}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(LabError::Config(
                "switch_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Largest count any layer uses at any time.
    pub fn max_count(&self) -> usize {
        self.early_counts
            .iter()
            .copied()
            .chain(std::iter::once(self.default_count))
            .max()
            .unwrap_or(self.default_count)
    }
}

pub fn activated_experts_at(layer: i64, progress: f64, s: &SparsitySchedule) -> Result<usize> {
    if layer < 0 {
        return Err(LabError::Invalid(format!("negative layer index {layer}")));
    }
    let layer = layer as usize;
    if progress < s.switch_fraction && layer < s.early_counts.len() {
        Ok(s.early_counts[layer])
    } else {
        Ok(s.default_count)
    }
}

/// Warmup, constant peak, cosine to `mid_lr`, cosine to `final_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Fraction of training (warmup included) spent at or below the peak.
    pub stable_fraction: f64,
    pub mid_lr: f64,
    pub mid_fraction: f64,
    pub final_lr: f64,
    pub total_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::reference(100_000)
    }
}

impl LrSchedule {
    /// Peak 2.6e-4 after 2000 warmup steps, constant to 60%, cosine to 1.6e-4
    /// by 90%, cosine to 2.6e-5 at the end.
    pub fn reference(total_steps: usize) -> Self {
        Self {
            warmup_steps: 2000,
            peak_lr: 2.6e-4,
            stable_fraction: 0.6,
            mid_lr: 1.6e-4,
            mid_fraction: 0.3,
            final_lr: 2.6e-5,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.peak_lr) || !pos(self.mid_lr) || !pos(self.final_lr) {
            return Err(LabError::Config("learning rates must be positive".into()));
        }
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.stable_fraction)
            || !frac(self.mid_fraction)
            || self.stable_fraction + self.mid_fraction > 1.0 + 1e-12
        {
            return Err(LabError::Config(
                "stable_fraction + mid_fraction must not exceed 1".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(LabError::Config("total_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn final_fraction(&self) -> f64 {
        1.0 - self.stable_fraction - self.mid_fraction
    }
}

/// Cosine interpolation from `from` (t = 0) to `to` (t = 1), exact at t = 1.
fn cosine(from: f64, to: f64, t: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (PI * t.clamp(0.0, 1.0)).cos())
}

/// Learning rate at `step`, with phase boundaries placed by step fraction.
pub fn learning_rate_at(step: usize, s: &LrSchedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(LabError::Invalid(format!(
            "step {step} outside [0, {}]",
            s.total_steps
        )));
    }
    Ok(learning_rate_at_progress(
        step,
        step as f64 / s.total_steps as f64,
        s,
    ))
}

/// Learning rate with warmup counted in steps and the later phases placed by
/// training `progress` in `[0, 1]`.
pub fn learning_rate_at_progress(step: usize, progress: f64, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let stable_end = s.stable_fraction;
    let mid_end = s.stable_fraction + s.mid_fraction;
    if progress <= stable_end {
        s.peak_lr
    } else if progress <= mid_end {
        cosine(
            s.peak_lr,
            s.mid_lr,
            (progress - stable_end) / s.mid_fraction,
        )
    } else {
        let span = s.final_fraction();
        if span <= 0.0 {
            return s.mid_lr;
        }
        cosine(s.mid_lr, s.final_lr, (progress - mid_end) / span)
    }
}

/// Linear batch-size ramp over the first `ramp_fraction` of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchRamp {
    pub start: usize,
    pub end: usize,
    pub ramp_fraction: f64,
    /// Batch sizes are rounded to the nearest multiple of this.
    pub granularity: usize,
}

impl Default for BatchRamp {
    fn default() -> Self {
        Self::reference()
    }
}

impl BatchRamp {
    /// 1920 to 7680 over the first 40%.
    pub fn reference() -> Self {
        Self {
            start: 1920,
            end: 7680,
            ramp_fraction: 0.4,
            granularity: 1,
        }
    }

    pub fn constant(size: usize) -> Self {
        Self {
            start: size,
            end: size,
            ramp_fraction: 0.0,
            granularity: size.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.start == 0 || self.end == 0 || self.granularity == 0 {
            return Err(LabError::Config(
                "batch sizes and granularity must be positive".into(),
            ));
        }
        if !self.start.is_multiple_of(self.granularity)
            || !self.end.is_multiple_of(self.granularity)
        {
            return Err(LabError::Config(
                "batch ramp endpoints must be multiples of the granularity".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(LabError::Config("ramp_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn batch_size_at(progress: f64, ramp: &BatchRamp) -> usize {
    if progress >= ramp.ramp_fraction || ramp.start == ramp.end {
        return ramp.end;
    }
    let t = (progress / ramp.ramp_fraction).max(0.0);
    let raw = ramp.start as f64 + (ramp.end as f64 - ramp.start as f64) * t;
    let g = ramp.granularity as f64;
    let rounded = ((raw / g).round() * g) as usize;
    rounded.max(ramp.granularity)
}

/// Per-step batch sizes and token progress for a run of `steps` steps.
///
/// Progress at step `s` is `tokens consumed before s / total tokens`, and the
/// batch size of step `s` is `batch_size_at(progress_s)`. The total depends on
/// the sizes, so it is found by fixed-point iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPlan {
    pub batch_sizes: Vec<usize>,
    pub total_tokens: u64,
}

impl TokenPlan {
    pub fn new(steps: usize, ramp: &BatchRamp) -> Self {
        let mut total = (steps * ramp.end) as u64;
        let mut sizes = vec![ramp.end; steps];
        for _ in 0..64 {
            let mut consumed = 0u64;
            for b in sizes.iter_mut() {
                let progress = if total == 0 {
                    0.0
                } else {
                    consumed as f64 / total as f64
                };
                *b = batch_size_at(progress, ramp);
                consumed += *b as u64;
            }
            if consumed == total {
                break;
            }
            total = consumed;
        }
        let total_tokens = sizes.iter().map(|&b| b as u64).sum();
        Self {
            batch_sizes: sizes,
            total_tokens,
        }
    }

    pub fn steps(&self) -> usize {
        self.batch_sizes.len()
    }

    /// Fraction of tokens consumed before `step`; 1.0 at the end.
    pub fn progress_at(&self, step: usize) -> f64 {
        if self.total_tokens == 0 {
            return 0.0;
        }
        let consumed: u64 = self.batch_sizes[..step.min(self.steps())]
            .iter()
            .map(|&b| b as u64)
            .sum();
        consumed as f64 / self.total_tokens as f64
    }
}

/// Non-expert activated parameters (attention, embeddings) at full scale,
/// calibrated so that converting the progressive schedule to target sparsity
/// keeps exactly 0.50 / 0.65 of the activated parameters.
pub const FULL_SCALE_NON_EXPERT_PARAMS: u64 = 179_306_496;

/// Activated parameters per token: `Σ_layers K(layer) · 3·d·m + non_expert`.
pub fn activated_params(
    cfg: &LabConfig,
    s: &SparsitySchedule,
    progress: f64,
    non_expert: u64,
) -> Result<u64> {
    let per = cfg.params_per_expert();
    let mut total = non_expert;
    for layer in 0..cfg.num_layers {
        total += activated_experts_at(layer as i64, progress, s)? as u64 * per;
    }
    Ok(total)
}
