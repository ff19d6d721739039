//! Command-line front end: configuration, datasets, training, elucidation
//! and benchmarking.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod tools;
