//! Experiment orchestration: configuration, reproducible runs and their
//! on-disk outputs.

pub mod bp_check;
pub mod config;
pub mod output;
pub mod report;
pub mod rhm;

pub use config::{checkpoint_schedule, ExperimentKind, RunConfig};
pub use rhm::{run_phase_diagram, run_rhm_training, run_twin_experiment, TwinResult};
