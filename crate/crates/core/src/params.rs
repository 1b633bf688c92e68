//! Named parameter storage shared by the model, the optimizers, federation
//! and checkpointing.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// What a parameter is for; decides freezing, partitioning and sharing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    /// Pretrained weights, frozen during fine-tuning.
    Base,
    /// LoRA factor of a routed expert; expert 0 is the generalist.
    Expert { layer: usize, expert: usize },
    /// Gating weights of one routed sublayer.
    Router { layer: usize },
    /// LoRA factor outside the routed sublayers.
    Adapter,
}

impl ParamRole {
    /// Expert parameters Θ (lower level).
    pub fn is_expert_side(&self) -> bool {
        matches!(self, ParamRole::Expert { .. } | ParamRole::Adapter)
    }

    /// Routing parameters Φ (upper level).
    pub fn is_router(&self) -> bool {
        matches!(self, ParamRole::Router { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Derives a per-parameter RNG so that identically named parameters are
/// initialized identically regardless of how many others exist.
pub(crate) fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

pub(crate) fn gaussian(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        let mut rng = name_rng(seed, name);
        let normal = Normal::new(0.0, std).expect("positive std");
        t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    t
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, role, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.entries[id.0].role
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Ids whose role satisfies `pred`, in registration order.
    pub fn select(&self, pred: impl Fn(&ParamRole) -> bool) -> Vec<ParamId> {
        self.ids().filter(|id| pred(&self.role(*id))).collect()
    }

    pub fn numel(&self, pred: impl Fn(&ParamRole) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(&e.role)).map(|e| e.value.numel()).sum()
    }

    /// Places every parameter on `tape`; those matching `trainable` track
    /// gradients. The returned handles are indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&ParamRole) -> bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable(&e.role)))
            .collect()
    }

    /// Overwrites values of identically named parameters from `other`.
    pub fn load_matching(&mut self, other: &ParamStore, pred: impl Fn(&ParamRole) -> bool) -> Result<usize> {
        let mut loaded = 0;
        for e in other.entries.iter().filter(|e| pred(&e.role)) {
            if let Some(id) = self.find(&e.name) {
                let dst = &mut self.entries[id.0].value;
                if dst.shape() != e.value.shape() {
                    return Err(Error::ShapeMismatch {
                        what: e.name.clone(),
                        expected: dst.shape().to_vec(),
                        found: e.value.shape().to_vec(),
                    });
                }
                *dst = e.value.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self
                .entries
                .iter()
                .map(|e| {
                    (
                        e.name.clone(),
                        CheckpointEntry {
                            role: e.role,
                            shape: e.value.shape().to_vec(),
                            data: e.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, e) in &ckpt.params {
            let value = Tensor::new(e.shape.clone(), e.data.clone())?;
            store.add(name.clone(), e.role, value);
        }
        Ok(store)
    }
}

/// Flat JSON document of named arrays with shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: BTreeMap<String, CheckpointEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
