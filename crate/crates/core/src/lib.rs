//! Federated pre-training of small causal language models.

pub mod cli;
pub mod config;
pub mod data;
pub mod fedopt;
pub mod orchestrator;
pub mod params;
pub mod seed;
pub mod telemetry;
pub mod train;
pub mod transport;
