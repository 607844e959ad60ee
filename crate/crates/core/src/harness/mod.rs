//! Experiment harness: config, feature cache, checkpoints, reports and the
//! end-to-end runner behind the `ett` binary.

pub mod cache;
pub mod check;
pub mod config;
pub mod report;
pub mod runner;

pub use cache::{cache_load, cache_store, FeatureCache};
pub use config::{Arm, ExperimentConfig, DEFAULT_CONFIG};
pub use report::{Aggregate, RunReport};
pub use runner::{run, RunOptions, RunOutcome};
