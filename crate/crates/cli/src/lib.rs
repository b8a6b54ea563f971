//! Config-driven experiment runner: distillation runs on 2D targets with CSV
//! snapshots, metric tables, SVG plots and hashed run manifests.

pub mod config;
pub mod error;
pub mod plot;
pub mod runner;
pub mod snapshot;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use runner::{ablate_cfg, run, RunManifest, RunOptions};
