//! Mixture-of-experts routing and load-balancing laboratory.
//!
//! A desk-scale model of top-k routed SwiGLU experts with manual backprop,
//! several balancing strategies (conventional micro- and global-batch
//! auxiliary losses, a top-1 confidence-normalized loss, and bias-based
//! loss-free balancing), training schedules, and an experiment harness that
//! records per-layer load statistics.

pub mod balance;
pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod moe_layer;
pub mod parallel_sim;
pub mod plot;
pub mod router;
pub mod schedule;
pub mod tensor;

pub use error::{LabError, Result};
