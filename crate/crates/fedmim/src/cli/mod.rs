//! The human entry point: config files, the stage pipeline, sweep recipes,
//! and chart rendering behind the `fedmim` binary.

pub mod config;
pub mod pipeline;
pub mod plot;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use pipeline::{
    ablate_mask, ablate_rounds, compare, gradient_suite, run_pipeline, RunSummary, Through,
};
