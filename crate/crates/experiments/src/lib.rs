//! Configuration, synthetic tasks, ablation grids and plots for histogram
//! regression experiments.
//!
//! The `dmoe` binary exposes these as subcommands; the library is what the
//! acceptance suite drives directly.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod grid;
pub mod plot;
pub mod tasks;

pub use config::{ExperimentConfig, GridAxes, GridMode, InducedKind, LayoutKind, OptimizerName};
pub use error::{ExperimentError, Result};
pub use grid::{read_results, run_cell, run_grid, run_single, write_results, MetricRow, RunOutput};
pub use tasks::{Generator, Splits, SyntheticTask};
