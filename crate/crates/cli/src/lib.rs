//! Library side of the `ew-embed` command-line tool: config schema, input
//! loading, synthetic data, subcommands and SVG output.

pub mod commands;
pub mod config;
pub mod svg;
pub mod synthetic;
