//! Continual-learning laboratory for per-example learning speed and
//! speed-based replay-buffer sampling on toy networks.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod exec;
pub mod hpsearch;
pub mod samplers;
pub mod seeds;
pub mod speed;
pub mod tensor;
