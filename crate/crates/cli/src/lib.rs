//! Configuration, orchestration and reporting for federated mixture-of-LoRA
//! simulations and the convex convergence suites.
//!
//! Every command writes into one run directory: a `config.toml` snapshot,
//! its outputs, and a `manifest.json` with SHA-256 hashes of the config, the
//! input corpora and every file written.

pub mod commands;
pub mod config;
pub mod output;
