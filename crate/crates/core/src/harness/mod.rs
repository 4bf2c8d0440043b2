//! Synthetic task, optimizer, run configuration and the experiment loop.

pub mod checkpoint;
pub mod experiment;
pub mod optim;
pub mod runconfig;
pub mod task;

pub use checkpoint::Checkpoint;
pub use experiment::{run_experiment, Experiment};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use runconfig::{LrPhases, RunConfig};
pub use task::{make_task, SyntheticTask, TaskConfig};
