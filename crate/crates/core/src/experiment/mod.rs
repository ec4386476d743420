//! Experiment configs, the per-seed runner, table reproduction, property
//! suites, and plots.

pub mod csv;
pub mod plot;
pub mod config;
pub mod reproduce;
pub mod runner;
pub mod verify;

pub use config::{ExperimentConfig, ModelKind};
pub use runner::{run_experiment, run_seed, train, ExperimentReport, Manifest, SeedOutcome, SeedReport};
