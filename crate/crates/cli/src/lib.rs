//! Batch pipeline around the `boxcast` library: synthetic data generation,
//! fitting, prediction, evaluation, containment curves and latency benches.

pub mod artifacts;
pub mod commands;
pub mod pipeline;

pub use commands::{run, Cli};
