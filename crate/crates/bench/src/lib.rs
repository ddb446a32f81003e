//! Experiment harness: configuration, `(β, σ²)` sweeps and CSV output.

pub mod config;
pub mod experiment;
pub mod plotdata;

pub use config::{ConfigError, ExperimentConfig, ExperimentId};
pub use experiment::{compare_baseline, run_experiment, run_sweep, CellRow, PairedRow, RunError, SweepResult};
