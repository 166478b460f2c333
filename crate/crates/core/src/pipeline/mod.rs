//! End-to-end stages: compression, backbone training, evaluation, ablation.

pub mod checkpoint;
pub mod compress;
pub mod kb;
pub mod metrics;
pub mod ablate;
pub mod config;
pub mod stats;
pub mod train;

#[cfg(test)]
mod tests;
