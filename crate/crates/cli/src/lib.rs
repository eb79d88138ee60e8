//! Experiment harness: config loading, the subcommands and their artifacts.

pub mod config;
pub mod experiment;
pub mod manifest;

use sparsenn_core::train::TrainError;
use sparsenn_sim::SimError;

pub use config::{ConfigError, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_CAPACITY: i32 = 4;

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        match cause.downcast_ref::<SimError>() {
            Some(SimError::Capacity { .. }) => return EXIT_CAPACITY,
            Some(SimError::Config(_)) => return EXIT_CONFIG,
            _ => {}
        }
        if let Some(TrainError::InvalidHyper(_) | TrainError::InvalidRank { .. }) = cause.downcast_ref::<TrainError>() {
            return EXIT_CONFIG;
        }
    }
    EXIT_RUNTIME
}
