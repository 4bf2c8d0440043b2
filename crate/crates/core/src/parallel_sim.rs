//! Simulated data-parallel groups and the expert-parallel traffic model.
//!
//! Groups run sequentially (or on worker threads) and meet at explicit
//! reduction points. Every reduction walks its inputs in ascending group
//! order, so results never depend on scheduling.

use crate::config::{LoadStats, TokenBatch};
use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GroupShard {
    pub group_id: usize,
    pub batch: TokenBatch,
    /// First token of this shard in the global batch.
    pub offset: usize,
    pub stats: Option<LoadStats>,
}

/// Contiguous equal split of `batch` into `groups` shards, token order kept.
pub fn shard_batch(batch: &TokenBatch, groups: usize) -> Result<Vec<GroupShard>> {
    let n = batch.len();
    if groups == 0 || !n.is_multiple_of(groups) {
        return Err(LabError::Invalid(format!(
            "batch of {n} tokens cannot be split evenly into {groups} groups"
        )));
    }
    let per = n / groups;
    (0..groups)
        .map(|g| {
            Ok(GroupShard {
                group_id: g,
                batch: TokenBatch::new(batch.embeddings().row_block(g * per, per))?,
                offset: g * per,
                stats: None,
            })
        })
        .collect()
}

/// Element-wise sum, accumulated in group order.
pub fn all_reduce_sum(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| LabError::Invalid("all-reduce over zero groups".into()))?;
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != out.len() {
            return Err(LabError::shape("all_reduce", out.len(), v.len()));
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    Ok(out)
}

/// Element-wise mean, accumulated in group order.
pub fn all_reduce_mean(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = all_reduce_sum(vectors)?;
    let g = vectors.len() as f64;
    for o in &mut out {
        *o /= g;
    }
    Ok(out)
}

/// Bytes moved per expert-parallel token exchange:
/// `micro_batch · top_k · hidden · bytes_per_elem`.
pub fn ep_traffic(micro_batch: u64, top_k: u64, hidden: u64, bytes_per_elem: u64) -> Result<u64> {
    if micro_batch == 0 || top_k == 0 || hidden == 0 || bytes_per_elem == 0 {
        return Err(LabError::Invalid(
            "traffic arguments must all be positive".into(),
        ));
    }
    micro_batch
        .checked_mul(top_k)
        .and_then(|v| v.checked_mul(hidden))
        .and_then(|v| v.checked_mul(bytes_per_elem))
        .ok_or_else(|| LabError::Invalid("traffic overflows u64".into()))
}

/// Element width for a named dtype.
pub fn dtype_bytes(name: &str) -> Option<u64> {
    match name {
        "fp8" | "int8" => Some(1),
        "fp16" | "bf16" => Some(2),
        "fp32" => Some(4),
        "fp64" => Some(8),
        _ => None,
    }
}
