//! Command line and HTTP front end for `voxelfm-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod render;
pub mod server;

pub use cli::run;
