//! Load-balancing objectives and the loss-free bias controller.
//!
//! Two differentiable objectives are provided, both with analytic gradients
//! with respect to router logits:
//!
//! * the conventional loss `N_E · Σ f_i p_i`, where the token fractions `f`
//!   come from hard top-k assignments and are treated as constants, and
//! * the top-1 loss `N_E · Σ f̂_i² / p̄_top1`, where `f̂` is the mean softmax
//!   probability and `p̄_top1` the mean per-token maximum probability. Every
//!   term is differentiated, including the per-token max (subgradient at the
//!   argmax, ties to the lowest index).
//!
//! Gradients are split into "statistics" and "per-token" halves so the
//! simulation can compute statistics over a global batch, reduce them, and
//! then form gradients shard by shard.

use serde::{Deserialize, Serialize};

use crate::config::{LoadStats, StatScope};
use crate::error::{LabError, Result};
use crate::parallel_sim::all_reduce_mean;
use crate::router::{
    accumulate_load, softmax_backward, softmax_probs, top_k_indices, RoutingDecision,
};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceKind {
    None,
    LblMicroBatch,
    LblGlobalBatch,
    Top1Lbl,
    LossFree,
}

impl BalanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BalanceKind::None => "none",
            BalanceKind::LblMicroBatch => "lbl_micro_batch",
            BalanceKind::LblGlobalBatch => "lbl_global_batch",
            BalanceKind::Top1Lbl => "top1_lbl",
            BalanceKind::LossFree => "loss_free",
        }
    }

    /// True when the strategy contributes a gradient-bearing loss.
    pub fn has_loss(self) -> bool {
        matches!(
            self,
            BalanceKind::LblMicroBatch | BalanceKind::LblGlobalBatch | BalanceKind::Top1Lbl
        )
    }
}

impl std::str::FromStr for BalanceKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => BalanceKind::None,
            "lbl_micro_batch" => BalanceKind::LblMicroBatch,
            "lbl_global_batch" => BalanceKind::LblGlobalBatch,
            "top1_lbl" => BalanceKind::Top1Lbl,
            "loss_free" => BalanceKind::LossFree,
            other => return Err(LabError::Invalid(format!("unknown strategy `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceStrategy {
    pub kind: BalanceKind,
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl BalanceStrategy {
    pub fn new(kind: BalanceKind, alpha: f64, tau: f64, gamma: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(LabError::Config("temperature must be positive".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) || !(gamma.is_finite() && gamma >= 0.0) {
            return Err(LabError::Config(
                "balance coefficients must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            kind,
            alpha,
            tau,
            gamma,
        })
    }

    pub fn none() -> Self {
        Self {
            kind: BalanceKind::None,
            alpha: 0.0,
            tau: 1.0,
            gamma: 0.0,
        }
    }

    pub fn uses_bias(&self) -> bool {
        self.kind == BalanceKind::LossFree
    }
}

/// `N_E · Σ f_i p_i`.
pub fn conventional_lbl(stats: &LoadStats, num_experts: usize) -> f64 {
    num_experts as f64
        * stats
            .fractions
            .iter()
            .zip(&stats.mean_probs)
            .map(|(f, p)| f * p)
            .sum::<f64>()
}

/// Combines per-group statistics into a global-batch statistic: `f` and `p`
/// are averaged in group order, counts are summed.
pub fn global_batch_reduce(local: &[LoadStats]) -> Result<LoadStats> {
    let first = local
        .first()
        .ok_or_else(|| LabError::Invalid("global_batch_reduce needs at least one group".into()))?;
    let n_e = first.num_experts();
    for s in local {
        if s.num_experts() != n_e {
            return Err(LabError::shape("global_batch_reduce", n_e, s.num_experts()));
        }
        if s.tokens != first.tokens {
            return Err(LabError::Invalid(format!(
                "unequal local batch sizes ({} vs {})",
                first.tokens, s.tokens
            )));
        }
        if s.top_k != first.top_k {
            return Err(LabError::Invalid("groups disagree on top_k".into()));
        }
    }
    let fs: Vec<Vec<f64>> = local.iter().map(|s| s.fractions.clone()).collect();
    let ps: Vec<Vec<f64>> = local.iter().map(|s| s.mean_probs.clone()).collect();
    let mut counts = vec![0u64; n_e];
    for s in local {
        for (c, &x) in counts.iter_mut().zip(&s.counts) {
            *c += x;
        }
    }
    Ok(LoadStats {
        fractions: all_reduce_mean(&fs)?,
        mean_probs: all_reduce_mean(&ps)?,
        counts,
        scope: StatScope::GlobalBatch,
        tokens: first.tokens * local.len(),
        top_k: first.top_k,
    })
}

/// Batch statistics for the top-1 objective: column sums of the
/// probabilities and the sum of per-token maxima. Sums (not means) so that
/// shards can be reduced exactly by addition before normalizing.
#[derive(Clone, Debug, PartialEq)]
pub struct Top1Sums {
    pub prob_sums: Vec<f64>,
    pub max_sum: f64,
    pub tokens: usize,
}

impl Top1Sums {
    pub fn from_probs(probs: &Matrix) -> Self {
        let mut max_sum = 0.0;
        for j in 0..probs.rows() {
            max_sum += probs
                .row(j)
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        }
        Self {
            prob_sums: probs.column_sums(),
            max_sum,
            tokens: probs.rows(),
        }
    }

    pub fn zeros(num_experts: usize) -> Self {
        Self {
            prob_sums: vec![0.0; num_experts],
            max_sum: 0.0,
            tokens: 0,
        }
    }

    pub fn accumulate(&mut self, other: &Top1Sums) {
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += b;
        }
        self.max_sum += other.max_sum;
        self.tokens += other.tokens;
    }

    pub fn f_hat(&self) -> Vec<f64> {
        let n = self.tokens as f64;
        self.prob_sums.iter().map(|s| s / n).collect()
    }

    pub fn p_bar(&self) -> f64 {
        self.max_sum / self.tokens as f64
    }

    /// `N_E · Σ f̂_i² / p̄_top1`.
    pub fn value(&self) -> f64 {
        let n_e = self.prob_sums.len() as f64;
        let sq: f64 = self.f_hat().iter().map(|f| f * f).sum();
        n_e * sq / self.p_bar()
    }
}

/// Top-1 objective evaluated on a single batch of logits.
pub fn top1_lbl(logits: &Matrix, tau: f64) -> f64 {
    Top1Sums::from_probs(&softmax_probs(logits, tau)).value()
}

/// Gradient of `coeff · Σ_i f_i Σ_j P_ji` with respect to the logits of the
/// rows in `probs`, `f` held constant. For the conventional loss over a scope
/// of `N` tokens, `coeff = α · N_E / N`.
pub fn lbl_logit_grad(probs: &Matrix, fractions: &[f64], coeff: f64, tau: f64) -> Matrix {
    let mut dprobs = Matrix::zeros(probs.rows(), probs.cols());
    for j in 0..probs.rows() {
        for (d, &f) in dprobs.row_mut(j).iter_mut().zip(fractions) {
            *d = coeff * f;
        }
    }
    softmax_backward(probs, &dprobs, tau)
}

/// Gradient of `α · N_E Σ f̂² / p̄` with respect to the logits of the rows in
/// `probs`, where `global` holds the statistics of the whole scope those rows
/// belong to.
pub fn top1_logit_grad(probs: &Matrix, global: &Top1Sums, alpha: f64, tau: f64) -> Matrix {
    let n_e = probs.cols() as f64;
    let n = global.tokens as f64;
    let f_hat = global.f_hat();
    let p_bar = global.p_bar();
    let sq: f64 = f_hat.iter().map(|f| f * f).sum();
    // dL/dP_ji = α [2 N_E f̂_i / (N p̄) − N_E Σf̂² / (N p̄²) · 1{i = argmax_j}]
    let num_coeff = alpha * 2.0 * n_e / (n * p_bar);
    let den_coeff = alpha * n_e * sq / (n * p_bar * p_bar);
    let mut dprobs = Matrix::zeros(probs.rows(), probs.cols());
    for j in 0..probs.rows() {
        let top = top_k_indices(probs.row(j), 1)[0];
        let row = dprobs.row_mut(j);
        for (d, &f) in row.iter_mut().zip(&f_hat) {
            *d = num_coeff * f;
        }
        row[top] -= den_coeff;
    }
    softmax_backward(probs, &dprobs, tau)
}

/// `∂(α · loss)/∂logits` for a single batch that is its own statistical
/// scope. Loss-free balancing has no gradient and is rejected.
pub fn balance_gradient(strategy: &BalanceStrategy, decision: &RoutingDecision) -> Result<Matrix> {
    let probs = &decision.probs;
    match strategy.kind {
        BalanceKind::LblMicroBatch | BalanceKind::LblGlobalBatch => {
            let stats = accumulate_load(decision, probs.cols());
            let coeff = strategy.alpha * probs.cols() as f64 / probs.rows() as f64;
            Ok(lbl_logit_grad(probs, &stats.fractions, coeff, 1.0))
        }
        BalanceKind::Top1Lbl => {
            let p_tau = softmax_probs(&decision.logits, strategy.tau);
            Ok(top1_logit_grad(
                &p_tau,
                &Top1Sums::from_probs(&p_tau),
                strategy.alpha,
                strategy.tau,
            ))
        }
        BalanceKind::LossFree => Err(LabError::Invalid(
            "loss_free balancing has no gradient".into(),
        )),
        BalanceKind::None => Err(LabError::Invalid(
            "strategy `none` has no balance loss".into(),
        )),
    }
}

/// Sign-of-error bias controller: raise the bias of experts that received
/// fewer tokens than the mean, lower it for those that received more.
pub fn bias_update(bias: &[f64], counts: &[u64], gamma: f64) -> Vec<f64> {
    debug_assert_eq!(bias.len(), counts.len());
    let total: u64 = counts.iter().sum();
    let n = counts.len() as u64;
    bias.iter()
        .zip(counts)
        .map(|(&b, &c)| {
            // compare c against total / n without rounding
            match (c * n).cmp(&total) {
                std::cmp::Ordering::Less => b + gamma,
                std::cmp::Ordering::Greater => b - gamma,
                std::cmp::Ordering::Equal => b,
            }
        })
        .collect()
}
