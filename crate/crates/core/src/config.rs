//! Shared domain types: lab configuration, token batches and load statistics.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tensor::Matrix;

/// Standard deviation used for every learnable parameter at initialization.
pub const INIT_STD: f64 = 0.02;

/// Coefficient applied to the load-balancing objective by default.
pub const DEFAULT_LBL_COEFFICIENT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_size: usize,
    pub expert_intermediate_size: usize,
    pub num_layers: usize,
    pub num_parallel_groups: usize,
    pub seed: u64,
    pub lbl_coefficient: f64,
    pub temperature: f64,
    pub bias_step: f64,
    /// For K > 1: renormalize gate values over the selected experts.
    pub renormalize_gates: bool,
    /// Round gating inputs to f32 and compute logits in f32 arithmetic.
    pub fp32_gating: bool,
    /// All-reduce the mean gating probabilities as well as the token fractions.
    pub sync_probs: bool,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LabConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            num_experts: 16,
            top_k: 1,
            hidden_size: 32,
            expert_intermediate_size: 16,
            num_layers: 4,
            num_parallel_groups: 4,
            seed: 0,
            lbl_coefficient: DEFAULT_LBL_COEFFICIENT,
            temperature: 1.0,
            bias_step: 1e-3,
            renormalize_gates: true,
            fp32_gating: false,
            sync_probs: true,
        }
    }

    /// Full-size reference model: 96 experts, one active, 56 layers.
    pub fn full_scale() -> Self {
        Self {
            num_experts: 96,
            top_k: 1,
            hidden_size: 1536,
            expert_intermediate_size: 768,
            num_layers: 56,
            num_parallel_groups: 1,
            ..Self::desk()
        }
    }

    /// Number of weights in one SwiGLU expert (gate, up and down projections).
    pub fn params_per_expert(&self) -> u64 {
        3 * self.hidden_size as u64 * self.expert_intermediate_size as u64
    }
}

/// Returns `cfg` unchanged if every invariant holds, otherwise an error naming
/// the first violated one.
pub fn validate_config(cfg: LabConfig) -> Result<LabConfig> {
    let fail = |msg: &str| Err(LabError::Config(msg.to_string()));
    if cfg.num_experts == 0 {
        return fail("num_experts must be at least 1");
    }
    if cfg.top_k == 0 {
        return fail("top_k must be at least 1");
    }
    if cfg.top_k > cfg.num_experts {
        return fail("top_k exceeds num_experts");
    }
    if cfg.hidden_size == 0 {
        return fail("hidden_size must be at least 1");
    }
    if cfg.expert_intermediate_size == 0 {
        return fail("expert_intermediate_size must be at least 1");
    }
    if cfg.num_layers == 0 {
        return fail("num_layers must be at least 1");
    }
    if cfg.num_parallel_groups == 0 {
        return fail("num_parallel_groups must be at least 1");
    }
    if !cfg.lbl_coefficient.is_finite() || cfg.lbl_coefficient < 0.0 {
        return fail("lbl_coefficient must be finite and non-negative");
    }
    if !cfg.temperature.is_finite() || cfg.temperature <= 0.0 {
        return fail("temperature must be positive");
    }
    if !cfg.bias_step.is_finite() || cfg.bias_step < 0.0 {
        return fail("bias_step must be finite and non-negative");
    }
    Ok(cfg)
}

/// `N_B` synthetic token embeddings of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    embeddings: Matrix,
}

impl TokenBatch {
    pub fn new(embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(LabError::Invalid("token batch must not be empty".into()));
        }
        if !embeddings.is_finite() {
            return Err(LabError::NonFinite("token embeddings"));
        }
        Ok(Self { embeddings })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn into_embeddings(self) -> Matrix {
        self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn hidden_size(&self) -> usize {
        self.embeddings.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatScope {
    MicroBatch,
    GlobalBatch,
}

/// Per-expert routing statistics over one statistical scope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    /// Token-allocation fraction `f_i = counts_i / N_B`.
    pub fractions: Vec<f64>,
    /// Mean gating probability `p_i`.
    pub mean_probs: Vec<f64>,
    pub counts: Vec<u64>,
    pub scope: StatScope,
    /// Tokens in the scope.
    pub tokens: usize,
    pub top_k: usize,
}

impl LoadStats {
    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    /// Checks the sum invariants: `Σf = K`, `Σp = 1`, `Σcounts = K·N_B`.
    pub fn check(&self) -> Result<()> {
        let k = self.top_k as f64;
        let sf: f64 = self.fractions.iter().sum();
        let sp: f64 = self.mean_probs.iter().sum();
        let sc: u64 = self.counts.iter().sum();
        if (sf - k).abs() > 1e-9 {
            return Err(LabError::Invalid(format!(
                "fractions sum to {sf}, expected {k}"
            )));
        }
        if (sp - 1.0).abs() > 1e-9 {
            return Err(LabError::Invalid(format!(
                "mean probs sum to {sp}, expected 1"
            )));
        }
        if sc != (self.top_k * self.tokens) as u64 {
            return Err(LabError::Invalid(format!(
                "counts sum to {sc}, expected {}",
                self.top_k * self.tokens
            )));
        }
        Ok(())
    }
}
