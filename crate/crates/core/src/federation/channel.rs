//! Instrumented client/server exchange and uniform averaging.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamRole, ParamStore};

/// Accounting precision: bfloat16.
pub const BYTES_PER_SCALAR: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

/// One parameter tensor crossing the client/server boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub name: String,
    pub role: ParamRole,
    pub scalars: usize,
    pub bytes: usize,
}

/// Records every tensor that leaves or reaches a client and holds the
/// server's inbox of uploads awaiting aggregation.
#[derive(Clone, Debug, Default)]
pub struct ExchangeChannel {
    log: Vec<Transfer>,
    inbox: Vec<Vec<(String, Tensor)>>,
}

impl ExchangeChannel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn transfers(&self) -> &[Transfer] {
        &self.log
    }

    pub fn bytes(&self, round: usize, client: usize, direction: Direction) -> usize {
        self.log
            .iter()
            .filter(|t| t.round == round && t.client == client && t.direction == direction)
            .map(|t| t.bytes)
            .sum()
    }

    fn record(&mut self, round: usize, client: usize, direction: Direction, name: &str, role: ParamRole, value: &Tensor) {
        self.log.push(Transfer {
            round,
            client,
            direction,
            name: name.to_string(),
            role,
            scalars: value.numel(),
            bytes: value.numel() * BYTES_PER_SCALAR,
        });
    }

    /// Client `client` uploads every parameter matching `shared` into the
    /// server inbox.
    pub fn upload(&mut self, round: usize, client: usize, store: &ParamStore, shared: &dyn Fn(&ParamRole) -> bool) {
        let upload = store
            .entries()
            .iter()
            .filter(|e| shared(&e.role))
            .map(|e| {
                self.record(round, client, Direction::Up, &e.name, e.role, &e.value);
                (e.name.clone(), e.value.clone())
            })
            .collect();
        self.inbox.push(upload);
    }

    pub fn has_pending(&self) -> bool {
        !self.inbox.is_empty()
    }

    /// Uniform mean of the inbox, which is emptied.
    pub fn aggregate(&mut self) -> Result<Vec<(String, Tensor)>> {
        let uploads = std::mem::take(&mut self.inbox);
        average_uploads(&uploads)
    }

    /// Mean of the inbox without consuming it.
    pub fn peek_aggregate(&self) -> Result<Vec<(String, Tensor)>> {
        average_uploads(&self.inbox)
    }

    /// Client `client` overwrites its copies of `params` by name.
    pub fn download(&mut self, round: usize, client: usize, store: &mut ParamStore, params: &[(String, Tensor)]) -> Result<()> {
        for (name, value) in params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::InvalidConfig(format!("client {client} lacks shared parameter {name}")))?;
            let role = store.role(id);
            self.record(round, client, Direction::Down, name, role, value);
            *store.get_mut(id) = value.clone();
        }
        Ok(())
    }
}

/// Elementwise uniform mean of the uploads, matched by name and order.
pub fn average_uploads(uploads: &[Vec<(String, Tensor)>]) -> Result<Vec<(String, Tensor)>> {
    let first = uploads.first().ok_or(Error::Empty("client uploads"))?;
    if let Some(c) = uploads.iter().position(|u| u.len() != first.len()) {
        return Err(Error::ShapeMismatch {
            what: format!("shared parameter count of client {c}"),
            expected: vec![first.len()],
            found: vec![uploads[c].len()],
        });
    }
    let n = uploads.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(k, (name, v0))| {
            let mut acc = Tensor::zeros(v0.shape());
            for (c, up) in uploads.iter().enumerate() {
                let (other, v) = up
                    .get(k)
                    .ok_or_else(|| Error::InvalidConfig(format!("client {c} did not upload {name}")))?;
                if other != name || !v.same_shape(v0) {
                    return Err(Error::ShapeMismatch {
                        what: format!("shared parameter {name} of client {c}"),
                        expected: v0.shape().to_vec(),
                        found: v.shape().to_vec(),
                    });
                }
                acc.add_assign(v);
            }
            acc.scale_assign(1.0 / n);
            Ok((name.clone(), acc))
        })
        .collect()
}
