//! Gating network: logits, temperature softmax, top-k selection and load counting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LoadStats, StatScope, INIT_STD};
use crate::error::{LabError, Result};
use crate::tensor::Matrix;

/// Gate weights (`d x N_E`) and the per-expert selection bias used by
/// loss-free balancing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub gate_weights: Matrix,
    pub bias: Vec<f64>,
}

impl RouterState {
    pub fn new(gate_weights: Matrix) -> Self {
        let n = gate_weights.cols();
        Self {
            gate_weights,
            bias: vec![0.0; n],
        }
    }

    pub fn init<R: Rng + ?Sized>(hidden: usize, num_experts: usize, rng: &mut R) -> Self {
        Self::new(Matrix::randn(hidden, num_experts, INIT_STD, rng))
    }

    pub fn num_experts(&self) -> usize {
        self.gate_weights.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.gate_weights.rows()
    }
}

/// Per-token selections for one batch. `assignments` and `gate_values` are
/// flattened `N_B x K`, slot order is descending decision score.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub top_k: usize,
    pub assignments: Vec<usize>,
    pub gate_values: Vec<f64>,
    pub logits: Matrix,
    pub probs: Matrix,
}

impl RoutingDecision {
    pub fn num_tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn experts_of(&self, token: usize) -> &[usize] {
        &self.assignments[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn gates_of(&self, token: usize) -> &[f64] {
        &self.gate_values[token * self.top_k..(token + 1) * self.top_k]
    }
}

/// `logits[j][i] = <x_j, w_i>`. With `fp32` both operands are rounded to
/// `f32` and the dot product is accumulated in `f32`.
pub fn compute_logits(inputs: &Matrix, router: &RouterState, fp32: bool) -> Result<Matrix> {
    let w = &router.gate_weights;
    if inputs.cols() != w.rows() {
        return Err(LabError::shape("compute_logits", w.rows(), inputs.cols()));
    }
    if !fp32 {
        return inputs.matmul(w);
    }
    let (n, d, e) = (inputs.rows(), w.rows(), w.cols());
    let w32: Vec<f32> = w.as_slice().iter().map(|&v| v as f32).collect();
    let mut out = Matrix::zeros(n, e);
    for j in 0..n {
        let x32: Vec<f32> = inputs.row(j).iter().map(|&v| v as f32).collect();
        for i in 0..e {
            let mut acc = 0.0f32;
            for k in 0..d {
                acc += x32[k] * w32[k * e + i];
            }
            out.set(j, i, acc as f64);
        }
    }
    Ok(out)
}

/// Row-wise `softmax(logits / tau)` with max subtraction.
pub fn softmax_probs(logits: &Matrix, tau: f64) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for j in 0..logits.rows() {
        let row = logits.row(j);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let o = out.row_mut(j);
        let mut sum = 0.0;
        for (o, &z) in o.iter_mut().zip(row) {
            *o = ((z - max) / tau).exp();
            sum += *o;
        }
        for o in o.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Indices of the `k` largest entries of `scores`, descending, ties to the
/// lowest index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            match best {
                Some(b) if s <= scores[b] => {}
                _ => best = Some(i),
            }
        }
        chosen.push(best.expect("k <= len"));
    }
    chosen
}

/// Picks the top-`k` experts per token by `scores` and reads gate values
/// from `probs` at those indices. `scores` may include a selection bias; it
/// never reaches the gate values.
pub fn select_top_k(
    scores: &Matrix,
    logits: Matrix,
    probs: Matrix,
    k: usize,
    renormalize: bool,
) -> Result<RoutingDecision> {
    let e = probs.cols();
    if k == 0 || k > e {
        return Err(LabError::TopK { k, n: e });
    }
    if scores.shape() != probs.shape() {
        return Err(LabError::shape(
            "select_top_k",
            format!("{:?}", probs.shape()),
            format!("{:?}", scores.shape()),
        ));
    }
    let n = probs.rows();
    let mut assignments = Vec::with_capacity(n * k);
    let mut gate_values = Vec::with_capacity(n * k);
    for j in 0..n {
        let idx = top_k_indices(scores.row(j), k);
        let p = probs.row(j);
        let mut g: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        if k > 1 && renormalize {
            let s: f64 = g.iter().sum();
            for v in &mut g {
                *v /= s;
            }
        }
        assignments.extend(idx);
        gate_values.extend(g);
    }
    Ok(RoutingDecision {
        top_k: k,
        assignments,
        gate_values,
        logits,
        probs,
    })
}

/// Decision scores: logits plus the broadcast expert bias.
pub fn biased_scores(logits: &Matrix, bias: &[f64]) -> Matrix {
    let mut s = logits.clone();
    for j in 0..s.rows() {
        for (v, &b) in s.row_mut(j).iter_mut().zip(bias) {
            *v += b;
        }
    }
    s
}

/// Backward through `softmax(z / tau)` row by row:
/// `dz_k = p_k (dp_k - Σ_i dp_i p_i) / tau`.
pub fn softmax_backward(probs: &Matrix, dprobs: &Matrix, tau: f64) -> Matrix {
    debug_assert_eq!(probs.shape(), dprobs.shape());
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for j in 0..probs.rows() {
        let p = probs.row(j);
        let dp = dprobs.row(j);
        let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (o, (&pk, &dpk)) in out.row_mut(j).iter_mut().zip(p.iter().zip(dp)) {
            *o = pk * (dpk - inner) / tau;
        }
    }
    out
}

/// Micro-batch load statistics of one decision.
pub fn accumulate_load(decision: &RoutingDecision, num_experts: usize) -> LoadStats {
    let n = decision.num_tokens();
    let mut counts = vec![0u64; num_experts];
    for &e in &decision.assignments {
        counts[e] += 1;
    }
    let fractions = counts.iter().map(|&c| c as f64 / n as f64).collect();
    LoadStats {
        fractions,
        mean_probs: decision.probs.column_means(),
        counts,
        scope: StatScope::MicroBatch,
        tokens: n,
        top_k: decision.top_k,
    }
}
