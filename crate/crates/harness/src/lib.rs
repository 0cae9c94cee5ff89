//! Experiment harness: scenario configs, strategy runners, metrics columns
//! and cost comparison for the live-update serving simulation.

pub mod compare;
pub mod config;
pub mod metrics;
pub mod runner;
pub mod upstream;
