//! A tiny causal language model hosting MoE-LoRA on its MLP sublayers.
//!
//! Each position concatenates the embeddings of its last `window` tokens
//! (zeros before the sequence start) and maps them to the model width with a
//! frozen stem projection. `blocks` residual blocks follow, each an optional
//! single-head causal attention sublayer with plain LoRA and an MLP sublayer
//! whose two linear maps carry the experts. One router per MLP sublayer sees
//! the hidden state entering the sublayer; its gates drive both linear maps.
//! Logits use the transposed embedding table.

mod eval;
mod pretrain;

pub use eval::RoutingDumpEntry;
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{ExpertLinear, Gates, LoraAdapter, MoeLoraLayer, RouterLinear, RoutingRecord};
use crate::params::{gaussian, ParamId, ParamRole, ParamStore};

/// Architecture and adapter layout of one model instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Maximum sequence length of one forward pass.
    pub context: usize,
    pub blocks: usize,
    /// MLP hidden width as a multiple of `d_model`.
    pub mlp_mult: usize,
    pub attention: bool,
    /// Number of trailing token embeddings concatenated at each position.
    pub window: usize,
    /// Experts per MLP sublayer; expert 0 is the generalist.
    pub experts: usize,
    pub top_k: usize,
    /// Whether MLP experts are gated by a learned router. Without a router
    /// every expert is added with unit weight.
    pub routed: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            context: 16,
            blocks: 2,
            mlp_mult: 4,
            attention: false,
            window: 4,
            experts: 2,
            top_k: 2,
            routed: true,
            lora_rank: 4,
            lora_alpha: 8.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("context", self.context),
            ("blocks", self.blocks),
            ("mlp_mult", self.mlp_mult),
            ("window", self.window),
            ("experts", self.experts),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("model.{name} must be at least 1")));
            }
        }
        if self.routed && (self.top_k == 0 || self.top_k > self.experts) {
            return Err(Error::InvalidConfig(format!(
                "model.top_k {} must lie in 1..={}",
                self.top_k, self.experts
            )));
        }
        if self.lora_rank > self.d_model {
            return Err(Error::InvalidConfig(format!(
                "model.lora_rank {} exceeds d_model {}",
                self.lora_rank, self.d_model
            )));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(Error::InvalidConfig("model.lora_alpha must be positive".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig("model.init_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.mlp_mult * self.d_model
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: ExpertLinear,
    k: ExpertLinear,
    v: ExpertLinear,
    o: ExpertLinear,
}

#[derive(Clone, Debug)]
enum Mlp {
    Plain { fc1: ExpertLinear, fc2: ExpertLinear },
    Routed { fc1: MoeLoraLayer, fc2: ExpertLinear },
}

#[derive(Clone, Debug)]
struct Block {
    attn: Option<Attention>,
    mlp: Mlp,
}

/// Output of one tracked forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `rows × vocab_size`, sequences stacked in order.
    pub logits: Var,
    /// Gate handles of each routed layer, in block order.
    pub gates: Vec<Gates>,
    pub records: Vec<RoutingRecord>,
}

/// Scalar losses of one batch on a tape.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub task: Var,
    /// Sum over routed layers; `None` for unrouted models.
    pub balance: Option<Var>,
    pub records: Vec<RoutingRecord>,
}

#[derive(Clone, Debug)]
pub struct TinyLm {
    config: ModelConfig,
    store: ParamStore,
    embed: ParamId,
    stem: ParamId,
    blocks: Vec<Block>,
}

const MASKED: f64 = -1e30;

impl TinyLm {
    /// Fresh model: embeddings, LoRA `A` and routers Gaussian with
    /// `init_std`, base linear maps Gaussian with fan-in scaling, LoRA `B`
    /// zero. Initialization depends only on `(seed, name)`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    /// Base weights only, no adapters or routers.
    pub fn base_only(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// Fresh adapters on top of the base weights in `base`.
    pub fn from_base(config: &ModelConfig, seed: u64, base: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        let wanted = model.store.numel(|r| *r == ParamRole::Base);
        model.store.load_matching(base, |r| *r == ParamRole::Base)?;
        let offered = base.numel(|r| *r == ParamRole::Base);
        if offered != wanted {
            return Err(Error::ShapeMismatch {
                what: "base parameters".into(),
                expected: vec![wanted],
                found: vec![offered],
            });
        }
        Ok(model)
    }

    fn build(config: &ModelConfig, seed: u64, adapters: bool) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        let std = c.init_std;
        let mut store = ParamStore::new();
        // Linear maps use fan-in scaling; a zero `init_std` zeroes everything.
        let base = |store: &mut ParamStore, name: String, shape: &[usize]| {
            let s = if std == 0.0 { 0.0 } else { 1.0 / (shape[0] as f64).sqrt() };
            let t = gaussian(seed, &name, shape, s);
            store.add(name, ParamRole::Base, t)
        };
        let embed_name = "embed".to_string();
        let embed_value = gaussian(seed, &embed_name, &[c.vocab_size, d], std);
        let embed = store.add(embed_name, ParamRole::Base, embed_value);
        let stem = base(&mut store, "stem.W".into(), &[c.window * d, d]);

        let lora = |store: &mut ParamStore, prefix: &str, role: ParamRole, m: usize, n: usize| {
            let a_name = format!("{prefix}.A");
            let a = gaussian(seed, &a_name, &[m, c.lora_rank], std);
            let a = store.add(a_name, role, a);
            let b = store.add(format!("{prefix}.B"), role, Tensor::zeros(&[c.lora_rank, n]));
            LoraAdapter {
                a,
                b,
                rank: c.lora_rank,
                alpha: c.lora_alpha,
            }
        };

        let mut blocks = Vec::with_capacity(c.blocks);
        for l in 0..c.blocks {
            let attn = if c.attention {
                let proj = |store: &mut ParamStore, which: &str| {
                    let w = base(store, format!("block{l}.attn.{which}.W"), &[d, d]);
                    let experts = if adapters {
                        vec![lora(store, &format!("block{l}.attn.{which}.lora"), ParamRole::Adapter, d, d)]
                    } else {
                        Vec::new()
                    };
                    ExpertLinear { base: w, experts }
                };
                Some(Attention {
                    q: proj(&mut store, "q"),
                    k: proj(&mut store, "k"),
                    v: proj(&mut store, "v"),
                    o: proj(&mut store, "o"),
                })
            } else {
                None
            };

            let h = c.hidden();
            let bank = |store: &mut ParamStore, which: &str, m: usize, n: usize| {
                let w = base(store, format!("block{l}.{which}.W"), &[m, n]);
                let experts = if adapters {
                    (0..c.experts)
                        .map(|j| {
                            lora(
                                store,
                                &format!("block{l}.{which}.expert{j}"),
                                ParamRole::Expert { layer: l, expert: j },
                                m,
                                n,
                            )
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                ExpertLinear { base: w, experts }
            };
            let fc1 = bank(&mut store, "fc1", d, h);
            let fc2 = bank(&mut store, "fc2", h, d);
            let mlp = if adapters && c.routed {
                let name = format!("block{l}.router");
                let w = gaussian(seed, &name, &[d, c.experts], std);
                let weight = store.add(name, ParamRole::Router { layer: l }, w);
                let router = RouterLinear {
                    weight,
                    num_experts: c.experts,
                };
                Mlp::Routed {
                    fc1: MoeLoraLayer::new(l, fc1, router, c.top_k)?,
                    fc2,
                }
            } else {
                Mlp::Plain { fc1, fc2 }
            };
            blocks.push(Block { attn, mlp });
        }

        Ok(Self {
            config: config.clone(),
            store,
            embed,
            stem,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of routed MLP sublayers.
    pub fn routed_layers(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b.mlp, Mlp::Routed { .. })).count()
    }

    /// Sets every LoRA `B` factor to zero so all adapters contribute nothing.
    pub fn zero_adapters(&mut self) {
        let ids = self.store.select(|r| r.is_expert_side());
        for id in ids {
            if self.store.entry(id).name.ends_with(".B") {
                let t = self.store.get_mut(id);
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn check_sequences(&self, seqs: &[&[usize]]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Empty("sequence"));
            }
            if s.len() > self.config.context {
                return Err(Error::ContextOverflow {
                    len: s.len(),
                    context: self.config.context,
                });
            }
            if let Some(&token) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Causal forward over independent sequences stacked row-wise.
    ///
    /// `vars` must come from [`ParamStore::bind`] on this model's store.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], seqs: &[&[usize]]) -> Result<Forward> {
        self.check_sequences(seqs)?;
        let c = &self.config;
        let embed = vars[self.embed.index()];

        let mut parts = Vec::with_capacity(c.window);
        for w in 0..c.window {
            let lag = c.window - 1 - w;
            let idx: Vec<Option<usize>> = seqs
                .iter()
                .flat_map(|s| (0..s.len()).map(move |t| t.checked_sub(lag).map(|i| s[i])))
                .collect();
            parts.push(tape.embedding(embed, &idx)?);
        }
        let ctx = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
        let mut h = tape.matmul(ctx, vars[self.stem.index()])?;

        let mask = if c.attention { Some(causal_mask(seqs)) } else { None };
        let mut gates = Vec::new();
        let mut records = Vec::new();
        for block in &self.blocks {
            if let (Some(attn), Some(mask)) = (&block.attn, &mask) {
                let q = attn.q.mix(tape, vars, h, None)?;
                let k = attn.k.mix(tape, vars, h, None)?;
                let v = attn.v.mix(tape, vars, h, None)?;
                let kt = tape.transpose(k);
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, 1.0 / (c.d_model as f64).sqrt());
                let m = tape.constant(mask.clone());
                let scores = tape.add(scores, m)?;
                let a = tape.softmax_rows(scores);
                let mixed = tape.matmul(a, v)?;
                let out = attn.o.mix(tape, vars, mixed, None)?;
                h = tape.add(h, out)?;
            }
            let y = match &block.mlp {
                Mlp::Plain { fc1, fc2 } => {
                    let u = fc1.mix(tape, vars, h, None)?;
                    let a = tape.gelu(u);
                    fc2.mix(tape, vars, a, None)?
                }
                Mlp::Routed { fc1, fc2 } => {
                    let (g, rec) = fc1.route(tape, vars, h)?;
                    let u = fc1.linear.mix(tape, vars, h, Some(&g))?;
                    let a = tape.gelu(u);
                    let y = fc2.mix(tape, vars, a, Some(&g))?;
                    gates.push(g);
                    records.push(rec);
                    y
                }
            };
            h = tape.add(h, y)?;
        }
        let et = tape.transpose(embed);
        let logits = tape.matmul(h, et)?;
        Ok(Forward { logits, gates, records })
    }

    /// Next-token losses on windows of `len + 1` tokens: inputs are each
    /// window without its last token, targets without its first.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        windows: &[Vec<usize>],
        lb_mode: crate::moe::LoadBalanceMode,
    ) -> Result<BatchLoss> {
        let mut inputs = Vec::with_capacity(windows.len());
        let mut targets = Vec::new();
        for w in windows {
            if w.len() < 2 {
                return Err(Error::TooShort {
                    what: "training window",
                    len: w.len(),
                    min: 2,
                });
            }
            inputs.push(&w[..w.len() - 1]);
            targets.extend_from_slice(&w[1..]);
        }
        let fwd = self.forward(tape, vars, &inputs)?;
        let task = tape.cross_entropy(fwd.logits, &targets)?;
        let mut balance = None;
        for (g, rec) in fwd.gates.iter().zip(&fwd.records) {
            let term = crate::moe::load_balance_term(tape, g.probs, rec, lb_mode)?;
            balance = Some(match balance {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(BatchLoss {
            task,
            balance,
            records: fwd.records,
        })
    }

    /// Untracked logits of a single sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, |_| false);
        let fwd = self.forward(&mut tape, &vars, &[tokens])?;
        Ok(tape.value(fwd.logits).clone())
    }
}

/// Additive mask over stacked sequences: row `i` may attend to column `j`
/// only within the same sequence and at or before its own position.
fn causal_mask(seqs: &[&[usize]]) -> Tensor {
    let n: usize = seqs.iter().map(|s| s.len()).sum();
    let mut m = Tensor::filled(&[n, n], MASKED);
    let mut offset = 0;
    for s in seqs {
        for i in 0..s.len() {
            for j in 0..=i {
                m.data_mut()[(offset + i) * n + offset + j] = 0.0;
            }
        }
        offset += s.len();
    }
    m
}
