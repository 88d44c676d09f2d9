//! Experiment runner for `tablegen-core`: configuration, runs with on-disk
//! artifacts, standalone evaluation, corpus statistics and replay checks.

pub mod config;
pub mod evaluate;
pub mod replay;
pub mod run;
pub mod stats;

pub use config::{BackendConfig, BackendKind, ConfigError, ConfigFile, ExperimentConfig, Overrides};
pub use evaluate::{cmd_evaluate, evaluate_predictions, EvaluateError, PredictionLine};
pub use replay::{cmd_replay_check, ReplayCheck};
pub use run::{cmd_run, cmd_run_with_backend, ExampleRecord, ExampleStatus, RunError, RunManifest, RunOutcome};
pub use stats::{cmd_stats, render_stats, StatsError};
