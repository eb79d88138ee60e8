//! Cycle-stepped simulator of a sparsity-aware PE array connected by a radix-4 H-tree.
//!
//! A layer runs as up to three barrier-separated phases: `V` (column-scheduled low-rank
//! projection reduced inside the tree), `U` (predictor bits) and `W` (broadcast of nonzero input
//! activations, skipping rows whose predictor bit is clear).

pub mod arch;
pub mod energy;
mod network;
pub mod report;
pub mod sim;

use thiserror::Error;

pub use arch::{map_col, map_row, ArchConfig, InjectionOrder, MemCapacities, TieBreak, VSchedule};
pub use energy::{energy_report, EnergyConfig, EnergyReport};
pub use report::{EventCounters, LayerReport, Phase, PhaseResult, SimReport};
pub use sim::{run_network, validate_network, Machine};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid architecture config: {0}")]
    Config(String),
    #[error("capacity exceeded: {limit} needs {required}, available {available}")]
    Capacity { limit: String, required: usize, available: usize },
    #[error("{phase} phase deadlocked at cycle {cycle}\n{dump}")]
    Deadlock { phase: Phase, cycle: u64, dump: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
