//! Experiment harness around `flanp-core`: config files, replicas, sweeps,
//! trace output and the analytic oracle checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
