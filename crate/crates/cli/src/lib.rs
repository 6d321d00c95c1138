//! Config-driven experiment harness around the `rdml` trainer.

pub mod app;
pub mod commands;
pub mod config;

pub use commands::{run_divcurve, run_sweep, run_train, RunSummary, SweepEntry, SweepReport};
pub use config::ExperimentConfig;
