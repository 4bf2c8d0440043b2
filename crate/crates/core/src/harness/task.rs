//! Clustered synthetic tokens with a per-layer blur.
//!
//! Token `j` of every batch belongs to cluster `j mod C`, so each cluster is
//! represented equally. Its embedding is the cluster center plus Gaussian
//! noise of standard deviation `1 / separability`. Before layer `l` sees the
//! residual stream `h`, it is pulled toward a fixed anchor,
//! `u = anchor + s_l · (h − anchor)`; a small `s_l` makes that layer's
//! inputs hard to tell apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// 0 means one cluster per expert.
    pub num_clusters: usize,
    pub separability: f64,
    /// Blur factor per layer; 1.0 leaves the layer input untouched.
    pub layer_difficulty: Vec<f64>,
    pub anchor_norm: f64,
    /// Per-coordinate standard deviation of the cluster targets.
    pub target_scale: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_clusters: 0,
            separability: 8.0,
            layer_difficulty: vec![0.2, 0.3, 0.7, 1.0],
            anchor_norm: 4.0,
            target_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub num_clusters: usize,
    pub centers: Matrix,
    pub separability: f64,
    pub targets: Matrix,
    pub layer_difficulty: Vec<f64>,
    pub anchor: Vec<f64>,
    pub seed: u64,
}

/// Independent stream per (seed, step, token, purpose), so a token's noise
/// does not depend on which group or worker draws it.
pub(crate) fn keyed_rng(seed: u64, step: u64, token: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&token.to_le_bytes());
    key[24..].copy_from_slice(&purpose.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const TASK_STREAM: u64 = 1;
const TOKEN_STREAM: u64 = 2;

pub fn make_task(
    cfg: &TaskConfig,
    num_experts: usize,
    hidden: usize,
    num_layers: usize,
    seed: u64,
) -> Result<SyntheticTask> {
    let c = if cfg.num_clusters == 0 {
        num_experts
    } else {
        cfg.num_clusters
    };
    if c == 0 {
        return Err(LabError::Config("num_clusters must be at least 1".into()));
    }
    if cfg.separability.is_nan() || cfg.separability <= 0.0 {
        return Err(LabError::Config(
            "task separability must be positive".into(),
        ));
    }
    if cfg.layer_difficulty.len() != num_layers {
        return Err(LabError::Config(format!(
            "task.layer_difficulty has {} entries for {num_layers} layers",
            cfg.layer_difficulty.len()
        )));
    }
    if cfg
        .layer_difficulty
        .iter()
        .any(|s| !s.is_finite() || *s < 0.0)
    {
        return Err(LabError::Config(
            "layer_difficulty entries must be finite and non-negative".into(),
        ));
    }
    if !cfg.anchor_norm.is_finite() || cfg.anchor_norm < 0.0 || !cfg.target_scale.is_finite() {
        return Err(LabError::Config(
            "anchor_norm and target_scale must be finite".into(),
        ));
    }
    let mut rng = keyed_rng(seed, u64::MAX, 0, TASK_STREAM);
    let centers = Matrix::randn(c, hidden, 1.0, &mut rng);
    let targets = Matrix::randn(c, hidden, cfg.target_scale, &mut rng);
    let dir: Vec<f64> = (0..hidden).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let anchor = dir.iter().map(|v| v / norm * cfg.anchor_norm).collect();
    Ok(SyntheticTask {
        num_clusters: c,
        centers,
        separability: cfg.separability,
        targets,
        layer_difficulty: cfg.layer_difficulty.clone(),
        anchor,
        seed,
    })
}

impl SyntheticTask {
    pub fn hidden_size(&self) -> usize {
        self.centers.cols()
    }

    pub fn cluster_of(&self, token: usize) -> usize {
        token % self.num_clusters
    }

    /// Embeddings of tokens `first .. first + n` of the batch for `step`.
    pub fn sample(&self, step: usize, first: usize, n: usize) -> Matrix {
        let d = self.hidden_size();
        let noise_std = 1.0 / self.separability;
        let mut out = Matrix::zeros(n, d);
        for r in 0..n {
            let j = first + r;
            let center = self.centers.row(self.cluster_of(j));
            let row = out.row_mut(r);
            if noise_std == 0.0 {
                row.copy_from_slice(center);
                continue;
            }
            let mut rng = keyed_rng(self.seed, step as u64, j as u64, TOKEN_STREAM);
            for (o, &c) in row.iter_mut().zip(center) {
                let z: f64 = rng.sample(StandardNormal);
                *o = c + noise_std * z;
            }
        }
        out
    }

    /// Targets for tokens `first .. first + n`.
    pub fn targets_for(&self, first: usize, n: usize) -> Matrix {
        let rows: Vec<usize> = (first..first + n).map(|j| self.cluster_of(j)).collect();
        self.targets.select_rows(&rows)
    }

    /// `anchor + s · (h − anchor)` for layer `layer`.
    pub fn blur(&self, layer: usize, h: &Matrix) -> Matrix {
        let s = self.layer_difficulty[layer];
        let mut u = h.clone();
        if s == 1.0 {
            return u;
        }
        for r in 0..u.rows() {
            for (v, &a) in u.row_mut(r).iter_mut().zip(&self.anchor) {
                *v = a + s * (*v - a);
            }
        }
        u
    }
}
