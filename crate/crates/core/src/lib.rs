//! Cycle-level simulator of a shared SRAM reached by many masters through a
//! split-and-dispatch request network and a merge-tree response network.
//!
//! [`engine::run`] is the library entry point; the `smsim` binary wraps it.

pub mod addressing;
pub mod cli;
pub mod config;
pub mod engine;
pub mod fabric;
pub mod memory;
pub mod metrics;
pub mod protocol;
pub mod workload;

pub use config::SimConfig;
pub use engine::{run, run_with, sweep, Axis, RunOptions};
pub use metrics::{PortReport, RunReport};
pub use workload::WorkloadSpec;
