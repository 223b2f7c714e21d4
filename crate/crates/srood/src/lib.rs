//! Experiment harness for sample-repairing OOD detection: dataset
//! manifests, configuration, the pipeline stages and their CLI.

pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use error::{AppError, AppResult};
