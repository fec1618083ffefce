//! Experiment harness for the UAV edge-computing agents: configuration,
//! training runs, capacity sweeps, plot data, oracle validation and trace
//! audits.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod stats;
pub mod trace;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
