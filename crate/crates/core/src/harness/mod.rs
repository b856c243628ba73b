//! Experiment harness: file formats, datasets, configuration and runners.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod io;

pub use config::ExperimentConfig;
