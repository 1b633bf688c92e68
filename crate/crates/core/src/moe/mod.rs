//! LoRA experts, linear Top-K routers and the mixture layer built from them.
//!
//! A routed layer computes, per token,
//! `y = x·W0 + Σ_{j ∈ topk(x)} p̃_j(x) · γ_j·(x·A_j)·B_j`
//! where `p̃` is the router softmax restricted to the selected experts and
//! renormalized. Expert 0 is always the generalist.

mod balance;

pub use balance::{expert_score_summary, lb_coefficients, load_balance_loss, load_balance_term, LoadBalanceMode};

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamId;

/// Low-rank update `ΔW = γ·A·B` with rank-stabilized `γ = alpha / sqrt(rank)`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / (self.rank as f64).sqrt()
    }

    /// `γ·(x·A)·B`
    pub fn delta(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let xa = tape.matmul(x, vars[self.a.index()])?;
        let xab = tape.matmul(xa, vars[self.b.index()])?;
        Ok(tape.scale(xab, self.scaling()))
    }
}

/// A frozen base map plus a bank of LoRA experts sharing its shape.
#[derive(Clone, Debug)]
pub struct ExpertLinear {
    pub base: ParamId,
    pub experts: Vec<LoraAdapter>,
}

impl ExpertLinear {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// The delta contribution of expert `j` alone; the base map is applied
    /// once by the caller.
    pub fn lora_delta_apply(&self, tape: &mut Tape, vars: &[Var], j: usize, x: Var) -> Result<Var> {
        let expert = self.experts.get(j).ok_or(Error::IndexOutOfRange {
            what: "expert",
            index: j,
            bound: self.experts.len(),
        })?;
        expert.delta(tape, vars, x)
    }

    /// Base output plus gate-weighted expert deltas. With `gates == None`
    /// every expert is added with weight one (plain LoRA).
    pub fn mix(&self, tape: &mut Tape, vars: &[Var], x: Var, gates: Option<&Gates>) -> Result<Var> {
        let mut y = tape.matmul(x, vars[self.base.index()])?;
        for j in 0..self.experts.len() {
            let delta = match gates {
                None => self.lora_delta_apply(tape, vars, j, x)?,
                Some(g) => {
                    if !g.used[j] {
                        continue;
                    }
                    let d = self.lora_delta_apply(tape, vars, j, x)?;
                    let w = tape.column(g.weights, j)?;
                    tape.scale_rows(d, w)?
                }
            };
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }
}

/// Linear gate `x ↦ softmax(x·φ)` over a layer's experts.
#[derive(Clone, Debug)]
pub struct RouterLinear {
    pub weight: ParamId,
    pub num_experts: usize,
}

/// Per-token routing outcome of one routed layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Full softmax probabilities, `tokens × num_experts`, row-major.
    pub probs: Vec<f64>,
    /// Selected expert indices, `tokens × top_k`, in descending probability.
    pub selected: Vec<usize>,
}

impl RoutingRecord {
    pub fn tokens(&self) -> usize {
        self.probs.len() / self.num_experts
    }

    pub fn token_probs(&self, t: usize) -> &[f64] {
        &self.probs[t * self.num_experts..(t + 1) * self.num_experts]
    }

    pub fn token_selected(&self, t: usize) -> &[usize] {
        &self.selected[t * self.top_k..(t + 1) * self.top_k]
    }

    /// Renormalized mixture weights of the selected experts of token `t`.
    pub fn mixture_weights(&self, t: usize) -> Vec<f64> {
        let p = self.token_probs(t);
        let sel = self.token_selected(t);
        let s: f64 = sel.iter().map(|&j| p[j]).sum();
        sel.iter().map(|&j| p[j] / s).collect()
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn select_topk(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Untracked routing of a token batch: `x` is `T × d`, `weight` is `d × n`.
pub fn route_topk(weight: &Tensor, x: &Tensor, k: usize, layer: usize) -> Result<RoutingRecord> {
    let n = weight.cols();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("top_k {k} must lie in 1..={n}")));
    }
    let probs = softmax_rows(&x.matmul(weight)?);
    Ok(record_from_probs(layer, &probs, k))
}

fn record_from_probs(layer: usize, probs: &Tensor, k: usize) -> RoutingRecord {
    let n = probs.cols();
    let mut selected = Vec::with_capacity(probs.rows() * k);
    for t in 0..probs.rows() {
        selected.extend(select_topk(probs.row(t), k));
    }
    RoutingRecord {
        layer,
        num_experts: n,
        top_k: k,
        probs: probs.data().to_vec(),
        selected,
    }
}

/// Tape handles produced by routing one batch.
#[derive(Clone, Debug)]
pub struct Gates {
    /// Full router softmax, `T × n`.
    pub probs: Var,
    /// Renormalized Top-K weights, zero off the selection, `T × n`.
    pub weights: Var,
    /// Whether any token selected expert `j`.
    pub used: Vec<bool>,
}

/// A routed layer: expert bank, its router and the Top-K width.
#[derive(Clone, Debug)]
pub struct MoeLoraLayer {
    pub layer: usize,
    pub linear: ExpertLinear,
    pub router: RouterLinear,
    pub top_k: usize,
}

impl MoeLoraLayer {
    pub fn new(layer: usize, linear: ExpertLinear, router: RouterLinear, top_k: usize) -> Result<Self> {
        let n = linear.num_experts();
        if n == 0 || router.num_experts != n {
            return Err(Error::InvalidConfig(format!(
                "layer {layer}: router width {} does not match {n} experts",
                router.num_experts
            )));
        }
        if top_k == 0 || top_k > n {
            return Err(Error::InvalidConfig(format!("layer {layer}: top_k {top_k} outside 1..={n}")));
        }
        Ok(Self {
            layer,
            linear,
            router,
            top_k,
        })
    }

    /// Routes `router_input` (`T × d`) and records the outcome.
    pub fn route(&self, tape: &mut Tape, vars: &[Var], router_input: Var) -> Result<(Gates, RoutingRecord)> {
        let logits = tape.matmul(router_input, vars[self.router.weight.index()])?;
        let probs = tape.softmax_rows(logits);
        let record = record_from_probs(self.layer, tape.value(probs), self.top_k);
        let n = self.router.num_experts;
        let mut mask = vec![false; record.probs.len()];
        let mut used = vec![false; n];
        for t in 0..record.tokens() {
            for &j in record.token_selected(t) {
                mask[t * n + j] = true;
                used[j] = true;
            }
        }
        let weights = tape.topk_gate(probs, &mask)?;
        Ok((Gates { probs, weights, used }, record))
    }

    pub fn moe_forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Gates, RoutingRecord)> {
        let (gates, record) = self.route(tape, vars, x)?;
        let y = self.linear.mix(tape, vars, x, Some(&gates))?;
        Ok((y, gates, record))
    }
}
