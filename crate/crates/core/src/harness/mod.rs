//! Experiment configuration, the replication grid, summaries and pipelines.

pub mod config;
pub mod experiment;
pub mod pipelines;
pub mod summarize;

pub use config::{ExperimentConfig, Profile};
pub use experiment::{run_experiment, RunOutcome};
pub use pipelines::{find_mnist_files, run_diagnose, run_mnist, MnistConfig, MnistReport};
pub use summarize::{summarize, Summary};
