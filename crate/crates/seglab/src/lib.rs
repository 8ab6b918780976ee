//! Experiment runner behind the `seglab` command-line tool.

pub mod config;
pub mod render;
pub mod runner;
pub mod table;
