//! Command-line pipeline around the `aerobatch` library: dataset build,
//! training, scenes, chained generation, post-processing, ablation sweeps
//! and SVG reports.

pub mod commands;
pub mod config;
pub mod eval;
pub mod plot;

pub use commands::{run, CliError, Command, Manifest};
pub use config::RunConfig;
