//! Auxiliary load-balancing losses and routing summaries.
//!
//! With `f_j` the fraction of tokens whose Top-K contains expert `j` and
//! `P_j` the mean router probability of expert `j`, the loss is
//! `Σ_j c_j · f_j · P_j`. The uniform mode uses `c_j = n` (Switch-style),
//! the unscaled mode `c_j = 1`, and the generalist-favored mode uses `c_0 = 1/((n−1)²+1)` and
//! `c_j = (n−1)/((n−1)²+1)` for `j ≥ 1`, which pushes the generalist
//! toward half of the routing mass under Top-2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RoutingRecord;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadBalanceMode {
    #[default]
    Uniform,
    Unscaled,
    GeneralistFavored,
}

pub fn lb_coefficients(n: usize, mode: LoadBalanceMode) -> Vec<f64> {
    match mode {
        LoadBalanceMode::Uniform => vec![n as f64; n],
        LoadBalanceMode::Unscaled => vec![1.0; n],
        LoadBalanceMode::GeneralistFavored => {
            let m = n.saturating_sub(1) as f64;
            let denom = m * m + 1.0;
            (0..n).map(|j| if j == 0 { 1.0 / denom } else { m / denom }).collect()
        }
    }
}

/// `f_j`: fraction of tokens selecting expert `j`.
pub(crate) fn selection_fractions(record: &RoutingRecord) -> Vec<f64> {
    let t = record.tokens();
    let mut f = vec![0.0; record.num_experts];
    for &j in &record.selected {
        f[j] += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= t as f64);
    f
}

/// `P_j`: mean router probability of expert `j`.
pub(crate) fn mean_probs(record: &RoutingRecord) -> Vec<f64> {
    let n = record.num_experts;
    let t = record.tokens();
    let mut p = vec![0.0; n];
    for row in record.probs.chunks(n) {
        for (a, b) in p.iter_mut().zip(row) {
            *a += b;
        }
    }
    p.iter_mut().for_each(|v| *v /= t as f64);
    p
}

pub fn load_balance_loss(record: &RoutingRecord, mode: LoadBalanceMode) -> Result<f64> {
    if record.tokens() == 0 {
        return Err(Error::Empty("routing record"));
    }
    let c = lb_coefficients(record.num_experts, mode);
    let f = selection_fractions(record);
    let p = mean_probs(record);
    Ok(c.iter().zip(&f).zip(&p).map(|((c, f), p)| c * f * p).sum())
}

/// Differentiable form: gradients flow through `P_j` only; `f_j` is a
/// piecewise-constant count.
pub fn load_balance_term(tape: &mut Tape, probs: Var, record: &RoutingRecord, mode: LoadBalanceMode) -> Result<Var> {
    if record.tokens() == 0 {
        return Err(Error::Empty("routing record"));
    }
    let n = record.num_experts;
    let c = lb_coefficients(n, mode);
    let f = selection_fractions(record);
    let w: Vec<f64> = c.iter().zip(&f).map(|(c, f)| c * f).collect();
    let w = tape.constant(Tensor::matrix(1, n, w)?);
    let p = tape.mean_rows(probs);
    let terms = tape.mul(p, w)?;
    Ok(tape.sum(terms))
}

/// Mean router probability per expert, per layer, across all tokens and
/// batches.
pub fn expert_score_summary(records: &[RoutingRecord]) -> Result<BTreeMap<usize, Vec<f64>>> {
    if records.is_empty() {
        return Err(Error::Empty("routing records"));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let entry = sums.entry(r.layer).or_insert_with(|| (vec![0.0; r.num_experts], 0));
        if entry.0.len() != r.num_experts {
            return Err(Error::ShapeMismatch {
                what: format!("routing records of layer {}", r.layer),
                expected: vec![entry.0.len()],
                found: vec![r.num_experts],
            });
        }
        for row in r.probs.chunks(r.num_experts) {
            for (a, b) in entry.0.iter_mut().zip(row) {
                *a += b;
            }
        }
        entry.1 += r.tokens();
    }
    Ok(sums
        .into_iter()
        .map(|(layer, (s, count))| (layer, s.into_iter().map(|v| v / count as f64).collect()))
        .collect())
}
