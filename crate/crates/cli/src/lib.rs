//! Experiment driver for ring-array photoacoustic reconstruction: TOML
//! configuration, simulation, reconstruction with each method, and scoring.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;
pub mod render;

pub use config::{ExperimentConfig, Method};
pub use error::CliError;
pub use pipeline::{
    load_measurement, reconstruct, run_all, run_compare, run_reconstruct, run_simulate, score,
    simulate, Layout, MetricsRow, Reconstruction,
};
