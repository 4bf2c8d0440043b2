//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm the gradient is clipped to; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-9,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One AdamW update in place. Gradients are first scaled so their global L2
/// norm is at most `grad_clip`. Weight decay is decoupled:
/// `p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + ε)`. Returns the pre-clip norm.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LabError::shape("adamw tensors", state.m.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(LabError::shape(
                "adamw tensor",
                format!("{} (tensor {i})", p.len()),
                g.len(),
            ));
        }
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(LabError::NonFinite("gradient"));
    }
    let c = state.config;
    let scale = if c.grad_clip > 0.0 && norm > c.grad_clip {
        c.grad_clip / norm
    } else {
        1.0
    };
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    let decay = 1.0 - lr * c.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            let gk = g[k] * scale;
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] = p[k] * decay - lr * mh / (vh.sqrt() + c.eps);
        }
    }
    Ok(norm)
}
