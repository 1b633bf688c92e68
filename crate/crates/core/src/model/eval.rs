//! Perplexity and routing inspection.

use serde::{Deserialize, Serialize};

use super::TinyLm;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::moe::RoutingRecord;

/// Windows scored per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

/// Top-1 routing decision of one token at one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDumpEntry {
    pub token: usize,
    pub layer: usize,
    pub top1_expert: usize,
}

/// Splits `stream` into windows of at most `context + 1` tokens; consecutive
/// windows share one boundary token so every token after the first is
/// predicted exactly once.
fn eval_windows(stream: &[usize], context: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + context + 1).min(stream.len());
        out.push(&stream[start..end]);
        start += context;
    }
    out
}

impl TinyLm {
    /// `exp` of the mean next-token cross-entropy over non-overlapping
    /// context windows.
    pub fn perplexity(&self, stream: &[usize]) -> Result<f64> {
        if stream.len() < 2 {
            return Err(Error::TooShort {
                what: "evaluation stream",
                len: stream.len(),
                min: 2,
            });
        }
        let windows = eval_windows(stream, self.config.context);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut i = 0;
        while i < windows.len() {
            // Batch only windows of equal length.
            let len = windows[i].len();
            let mut j = i;
            while j < windows.len() && j - i < EVAL_BATCH && windows[j].len() == len {
                j += 1;
            }
            let batch: Vec<Vec<usize>> = windows[i..j].iter().map(|w| w.to_vec()).collect();
            let mut tape = Tape::new();
            let vars = self.store.bind(&mut tape, |_| false);
            let loss = self.batch_loss(&mut tape, &vars, &batch, Default::default())?;
            let n = batch.len() * (len - 1);
            total += tape.value(loss.task).item() * n as f64;
            count += n;
            i = j;
        }
        Ok((total / count as f64).exp())
    }

    /// Routing records of every routed layer over `stream`, scored in
    /// context-length chunks.
    pub fn routing_records(&self, stream: &[usize]) -> Result<Vec<RoutingRecord>> {
        let mut out = Vec::new();
        for chunk in stream.chunks(self.config.context) {
            let mut tape = Tape::new();
            let vars = self.store.bind(&mut tape, |_| false);
            out.extend(self.forward(&mut tape, &vars, &[chunk])?.records);
        }
        Ok(out)
    }

    /// Per-token top-1 expert at every routed layer.
    pub fn routing_dump(&self, stream: &[usize]) -> Result<Vec<RoutingDumpEntry>> {
        let mut out = Vec::new();
        for chunk in stream.chunks(self.config.context) {
            let mut tape = Tape::new();
            let vars = self.store.bind(&mut tape, |_| false);
            for rec in self.forward(&mut tape, &vars, &[chunk])?.records {
                for (t, &token) in chunk.iter().enumerate() {
                    out.push(RoutingDumpEntry {
                        token,
                        layer: rec.layer,
                        top1_expert: rec.token_selected(t)[0],
                    });
                }
            }
        }
        Ok(out)
    }
}
