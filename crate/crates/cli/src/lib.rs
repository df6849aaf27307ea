//! Experiment runner for the FasTEN noisy-label trainer: config parsing,
//! sweeps over seeds and hyperparameters, result tables and the acceptance
//! suite.

pub mod config;
pub mod report;
pub mod runner;
pub mod summary;
pub mod verify;
