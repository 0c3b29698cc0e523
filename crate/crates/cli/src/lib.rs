//! Library surface of the `multiverb` command-line tool, split out so the
//! pipeline can be driven from integration tests as well as from the binary.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{ConfigOverrides, ExperimentConfig};
pub use pipeline::{run_experiment, RunManifest};
