//! Experiment runner: config files, seeded end-to-end runs, metrics CSV and
//! the command line.

pub mod cli;
pub mod config;
mod experiment;
mod metrics;

pub use config::{load_config, parse_config, DataSource, ExperimentConfig};
pub use experiment::{build_world, calibrate, protocol_config, run_experiment, Experiment, World};
pub use metrics::{csv_header, format_g, render_metrics_csv, write_metrics_csv, MetricsRecord};
