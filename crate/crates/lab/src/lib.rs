//! Configuration, data loading and output writing for simulation experiments.

pub mod config;
pub mod data;
pub mod plot;
pub mod runner;
