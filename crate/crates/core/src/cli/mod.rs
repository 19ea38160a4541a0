//! Experiment runner: configuration schema, pipeline commands, and report
//! generation for the `aquatwin` binary.
//!
//! Pipeline order: `generate` (scenario archive) -> `train` (model
//! archive) -> `calibrate` (conformal tables) -> `run` (trajectory CSVs)
//! -> `evaluate` (report tables + charts), plus `ablate` and `sweep` for
//! the component and sensitivity studies.

mod commands;
mod config;
pub mod report;

pub use commands::{
    cmd_ablate, cmd_calibrate, cmd_evaluate, cmd_generate, cmd_run, cmd_sweep, cmd_train,
    CellKey, CommandError,
};
pub use config::{ConfigError, ExperimentConfig, NetworkSource, KNOWN_POLICIES};
