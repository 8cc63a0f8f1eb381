//! Configuration, data files, experiment orchestration and result files.

pub mod config;
pub mod data;
pub mod experiments;
pub mod run;

pub use config::{emit_config, load_config, parse_config, ExperimentKind, FitEstimator, RunConfig};
pub use run::{prepare_fit, run_experiment, synth, PreparedFit, RunOutcome};
