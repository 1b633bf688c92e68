//! Simulated pretraining of the base weights on pooled client data.

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TinyLm};
use crate::autodiff::Tape;
use crate::batch::random_windows;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{name_rng, ParamRole, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-2,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Base-role parameters only.
    pub base: ParamStore,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

/// Trains the base weights with Adam on windows drawn from the pooled
/// `streams`. Zero steps returns the random initialization.
pub fn pretrain(config: &ModelConfig, seed: u64, streams: &[&[usize]], pcfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if streams.iter().all(|s| s.is_empty()) {
        return Err(Error::Empty("pretraining corpus"));
    }
    let streams: Vec<&[usize]> = streams.iter().copied().filter(|s| !s.is_empty()).collect();
    let mut model = TinyLm::base_only(config, seed)?;
    let mut rng = name_rng(seed, "pretrain.batches");
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    let ids = model.store.select(|r| *r == ParamRole::Base);
    let mut losses = Vec::with_capacity(pcfg.steps);
    for step in 0..pcfg.steps {
        let batch = random_windows(&mut rng, &streams, config.context + 1, pcfg.batch_size)?;
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, |r| *r == ParamRole::Base);
        let loss = model.batch_loss(&mut tape, &vars, &batch, Default::default())?;
        let value = tape.value(loss.task).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                phase: "pretrain",
                iteration: step,
                value,
            });
        }
        let grads = tape.backward(loss.task)?;
        let updates: Vec<_> = ids.iter().map(|&id| (id, grads.get(vars[id.index()]))).collect();
        opt.apply(&mut model.store, &updates, pcfg.lr);
        losses.push(value);
    }
    Ok(PretrainOutcome { base: model.store, losses })
}
