//! Experiment harness: configuration, file formats and commands.

pub mod ablate;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod metrics;

pub use checkpoint::Checkpoint;
pub use commands::exit_code;
pub use config::RunConfig;
pub use dataset::Dataset;
