//! Alternating bilevel optimization within one client.
//!
//! Expert parameters Θ (routed experts and plain adapters) take one step per
//! iteration on the training loss. Every `tau` iterations the routers Φ take
//! `router_steps` steps on the validation loss. Both objectives include the
//! weighted load-balancing term. The iteration counter is global: it keeps
//! counting across federated rounds.

mod lm;

pub use lm::StreamBatches;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::moe::LoadBalanceMode;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{ParamId, ParamRole, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    OneCycle,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Peak learning rate of the expert schedule.
    pub expert_lr: f64,
    /// Constant router learning rate.
    pub router_lr: f64,
    pub schedule: ScheduleKind,
    /// Router update period in iterations.
    pub tau: usize,
    /// Router steps per update.
    pub router_steps: usize,
    pub lb_weight: f64,
    pub lb_mode: LoadBalanceMode,
    /// Windows per batch.
    pub batch_size: usize,
    /// Draw router batches from the training stream instead of the
    /// validation stream.
    pub router_on_train: bool,
    pub optimizer: OptimizerKind,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            expert_lr: 2e-3,
            router_lr: 2e-3,
            schedule: ScheduleKind::OneCycle,
            tau: 30,
            router_steps: 10,
            lb_weight: 0.01,
            lb_mode: LoadBalanceMode::Uniform,
            batch_size: 8,
            router_on_train: false,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::InvalidConfig("trainer.tau must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("trainer.batch_size must be at least 1".into()));
        }
        if !(self.lb_weight >= 0.0 && self.lb_weight.is_finite()) {
            return Err(Error::InvalidConfig("trainer.lb_weight must be non-negative".into()));
        }
        for (name, lr) in [("expert_lr", self.expert_lr), ("router_lr", self.router_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!("trainer.{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Linear warmup from `0.1·peak` to `peak` over the first 10% of steps,
/// then cosine decay to `0.1·peak` at `total_steps`.
pub fn one_cycle_lr(step: usize, total_steps: usize, peak_lr: f64) -> f64 {
    const WARMUP: f64 = 0.1;
    const FLOOR: f64 = 0.1;
    if total_steps == 0 {
        return peak_lr;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = WARMUP * total;
    let floor = FLOOR * peak_lr;
    if step < warm {
        floor + (peak_lr - floor) * step / warm
    } else {
        let progress = (step - warm) / (total - warm);
        floor + (peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Loss values and gradients of one batch.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub task_loss: f64,
    pub lb_loss: f64,
    /// Gradients of `task + λ·lb` for the requested parameters only.
    pub grads: Vec<(ParamId, Tensor)>,
    /// Mean router probability of expert 0 per routed layer.
    pub generalist_scores: Vec<f64>,
}

impl Evaluation {
    pub fn objective(&self, lb_weight: f64) -> f64 {
        self.task_loss + lb_weight * self.lb_loss
    }
}

/// A model the bilevel trainer can drive.
pub trait Trainable {
    type Batch;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Evaluates `task + lb_weight·lb` on `batch`, differentiating only
    /// parameters whose role satisfies `trainable`.
    fn evaluate(
        &self,
        batch: &Self::Batch,
        lb_weight: f64,
        lb_mode: LoadBalanceMode,
        trainable: &dyn Fn(&ParamRole) -> bool,
    ) -> Result<Evaluation>;
}

/// Supplies training and validation batches.
pub trait BatchSource<B> {
    fn train_batch(&mut self) -> Result<B>;
    fn valid_batch(&mut self) -> Result<B>;
}

/// One row of the per-iteration training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub train_loss: f64,
    /// Most recent router-phase loss, if any router update has run.
    pub valid_loss: Option<f64>,
    pub generalist_scores: Vec<f64>,
}

/// Optimizer state and counters of one client.
#[derive(Clone, Debug)]
pub struct BilevelState {
    pub iteration: usize,
    /// Horizon of the expert learning-rate schedule.
    pub total_iterations: usize,
    pub router_updates: usize,
    pub last_valid_loss: Option<f64>,
    pub log: Vec<IterationLog>,
    expert_opt: Optimizer,
    router_opt: Optimizer,
}

impl BilevelState {
    pub fn new(config: &TrainerConfig, total_iterations: usize) -> Self {
        Self {
            iteration: 0,
            total_iterations,
            router_updates: 0,
            last_valid_loss: None,
            log: Vec::new(),
            expert_opt: Optimizer::new(config.optimizer),
            router_opt: Optimizer::new(config.optimizer),
        }
    }

    fn expert_lr(&self, config: &TrainerConfig) -> f64 {
        match config.schedule {
            ScheduleKind::Constant => config.expert_lr,
            ScheduleKind::OneCycle => one_cycle_lr(self.iteration.saturating_sub(1), self.total_iterations, config.expert_lr),
        }
    }
}

fn checked(eval: &Evaluation, lb_weight: f64, phase: &'static str, iteration: usize) -> Result<()> {
    let value = eval.objective(lb_weight);
    if !value.is_finite() || eval.grads.iter().any(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { phase, iteration, value });
    }
    Ok(())
}

/// One optimizer step on Θ; routers are evaluated but not updated.
pub fn expert_step<M: Trainable>(model: &mut M, state: &mut BilevelState, config: &TrainerConfig, batch: &M::Batch) -> Result<Evaluation> {
    let eval = model.evaluate(batch, config.lb_weight, config.lb_mode, &|r| r.is_expert_side())?;
    checked(&eval, config.lb_weight, "expert", state.iteration)?;
    let lr = state.expert_lr(config);
    state.expert_opt.apply(model.params_mut(), &eval.grads, lr);
    Ok(eval)
}

/// One optimizer step on Φ; experts are evaluated but not updated.
pub fn router_step<M: Trainable>(model: &mut M, state: &mut BilevelState, config: &TrainerConfig, batch: &M::Batch) -> Result<Evaluation> {
    let eval = model.evaluate(batch, config.lb_weight, config.lb_mode, &|r| r.is_router())?;
    checked(&eval, config.lb_weight, "router", state.iteration)?;
    state.router_opt.apply(model.params_mut(), &eval.grads, config.router_lr);
    Ok(eval)
}

/// `router_steps` router steps; returns the mean pre-step objective, or
/// `None` when nothing ran.
pub fn router_update<M: Trainable, S: BatchSource<M::Batch>>(
    model: &mut M,
    state: &mut BilevelState,
    config: &TrainerConfig,
    source: &mut S,
) -> Result<Option<f64>> {
    if config.router_steps == 0 || model.params().select(|r| r.is_router()).is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for _ in 0..config.router_steps {
        let batch = if config.router_on_train {
            source.train_batch()?
        } else {
            source.valid_batch()?
        };
        total += router_step(model, state, config, &batch)?.objective(config.lb_weight);
    }
    state.router_updates += 1;
    let mean = total / config.router_steps as f64;
    state.last_valid_loss = Some(mean);
    Ok(Some(mean))
}

/// Runs `iterations` expert steps, with a router update after every expert
/// step whose global iteration number is a multiple of `tau`.
pub fn local_train<M: Trainable, S: BatchSource<M::Batch>>(
    model: &mut M,
    state: &mut BilevelState,
    config: &TrainerConfig,
    source: &mut S,
    iterations: usize,
) -> Result<()> {
    config.validate()?;
    for _ in 0..iterations {
        state.iteration += 1;
        let batch = source.train_batch()?;
        let eval = expert_step(model, state, config, &batch)?;
        if state.iteration.is_multiple_of(config.tau) {
            router_update(model, state, config, source)?;
        }
        state.log.push(IterationLog {
            iteration: state.iteration,
            train_loss: eval.task_loss,
            valid_loss: state.last_valid_loss,
            generalist_scores: eval.generalist_scores,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
