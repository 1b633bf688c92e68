//! Bilevel training of [`TinyLm`] on token streams.

use rand_chacha::ChaCha8Rng;

use super::{BatchSource, Evaluation, Trainable};
use crate::autodiff::Tape;
use crate::batch::{random_windows, CyclicWindows};
use crate::error::Result;
use crate::model::TinyLm;
use crate::moe::LoadBalanceMode;
use crate::params::{ParamRole, ParamStore};

impl Trainable for TinyLm {
    type Batch = Vec<Vec<usize>>;

    fn params(&self) -> &ParamStore {
        TinyLm::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        TinyLm::params_mut(self)
    }

    fn evaluate(
        &self,
        batch: &Self::Batch,
        lb_weight: f64,
        lb_mode: LoadBalanceMode,
        trainable: &dyn Fn(&ParamRole) -> bool,
    ) -> Result<Evaluation> {
        let store = TinyLm::params(self);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, trainable);
        let loss = self.batch_loss(&mut tape, &vars, batch, lb_mode)?;
        let task_loss = tape.value(loss.task).item();
        let (objective, lb_loss) = match loss.balance {
            Some(b) => {
                let lb_loss = tape.value(b).item();
                let weighted = tape.scale(b, lb_weight);
                (tape.add(loss.task, weighted)?, lb_loss)
            }
            None => (loss.task, 0.0),
        };
        let ids = store.select(trainable);
        let grads = if ids.is_empty() {
            Vec::new()
        } else {
            let mut g = tape.backward(objective)?;
            ids.into_iter().map(|id| (id, g.take(vars[id.index()]))).collect()
        };
        let generalist_scores = loss
            .records
            .iter()
            .map(|r| (0..r.tokens()).map(|t| r.token_probs(t)[0]).sum::<f64>() / r.tokens() as f64)
            .collect();
        Ok(Evaluation {
            task_loss,
            lb_loss,
            grads,
            generalist_scores,
        })
    }
}

/// Training batches of random windows and validation batches swept
/// cyclically.
pub struct StreamBatches<'a> {
    pub train: &'a [usize],
    pub valid: &'a [usize],
    pub window: usize,
    pub batch_size: usize,
    pub rng: ChaCha8Rng,
    pub valid_cursor: &'a mut CyclicWindows,
}

impl BatchSource<Vec<Vec<usize>>> for StreamBatches<'_> {
    fn train_batch(&mut self) -> Result<Vec<Vec<usize>>> {
        random_windows(&mut self.rng, &[self.train], self.window, self.batch_size)
    }

    fn valid_batch(&mut self) -> Result<Vec<Vec<usize>>> {
        self.valid_cursor.next_batch(self.valid, self.batch_size)
    }
}
