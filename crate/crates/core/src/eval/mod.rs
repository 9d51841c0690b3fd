//! Metrics, run configuration and the command line.

pub mod cli;
pub mod config;
pub mod metrics;

pub use cli::{cli_main, cli_main_with};
pub use config::{label_path, DataSource, NamedScan, RunConfig, RunPaths, Split};
pub use metrics::{compute_miou, ConfusionMatrix};
