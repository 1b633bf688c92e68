//! Autodiff, MoE-LoRA layers, a tiny causal language model, bilevel
//! training, federated orchestration and synthetic data generation.

pub mod autodiff;
pub mod batch;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
