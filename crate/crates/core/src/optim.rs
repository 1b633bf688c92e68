//! First-order optimizers over a subset of a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam with bias correction, or plain SGD. Moment buffers are created on
/// first use of each parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to each `(id, grad)` pair; parameters not listed
    /// are untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads {
                    let p = store.get_mut(*id);
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (id, g) in grads {
                    let (m, v) = self
                        .moments
                        .entry(*id)
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    let p = store.get_mut(*id);
                    for (((w, d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
