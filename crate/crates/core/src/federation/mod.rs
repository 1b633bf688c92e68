//! Multi-client simulation with generalist aggregation.
//!
//! Each round follows the same order for every method: the server averages
//! the clients' shared parameters and clients download the mean; each client
//! trains locally; clients upload their shared parameters. Specialist
//! experts and routers never enter the exchange channel. Clients train in
//! parallel, each with its own RNG stream keyed by `(seed, client, round)`,
//! so results do not depend on the thread schedule.

mod channel;

pub use channel::{average_uploads, Direction, ExchangeChannel, Transfer, BYTES_PER_SCALAR};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::CyclicWindows;
use crate::data::ClientCorpus;
use crate::error::{Error, Result};
use crate::model::{pretrain, ModelConfig, PretrainConfig, TinyLm};
use crate::moe::expert_score_summary;
use crate::params::{name_rng, ParamRole, ParamStore};
use crate::trainer::{local_train, BilevelState, IterationLog, StreamBatches, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "pretrained")]
    Pretrained,
    #[serde(rename = "centralized")]
    Centralized,
    #[serde(rename = "local")]
    Local,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "comigs-2g")]
    Comigs2G,
    #[serde(rename = "comigs-2s")]
    Comigs2S,
    #[serde(rename = "comigs-1g1s")]
    Comigs1G1S,
    #[serde(rename = "comigs-1gxs")]
    Comigs1GXS,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Pretrained,
        Method::Centralized,
        Method::Local,
        Method::FedAvg,
        Method::Comigs2G,
        Method::Comigs2S,
        Method::Comigs1G1S,
        Method::Comigs1GXS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pretrained => "pretrained",
            Method::Centralized => "centralized",
            Method::Local => "local",
            Method::FedAvg => "fedavg",
            Method::Comigs2G => "comigs-2g",
            Method::Comigs2S => "comigs-2s",
            Method::Comigs1G1S => "comigs-1g1s",
            Method::Comigs1GXS => "comigs-1gxs",
        }
    }

    pub fn is_comigs(self) -> bool {
        matches!(self, Method::Comigs2G | Method::Comigs2S | Method::Comigs1G1S | Method::Comigs1GXS)
    }

    /// Model layout of client `i` with `experts` routed experts. Baselines
    /// carry one unrouted adapter of twice the rank, matching the adapter
    /// parameter count of two rank-`r` experts.
    pub fn client_model(self, base: &ModelConfig, experts: usize) -> ModelConfig {
        if self.is_comigs() {
            ModelConfig {
                experts,
                top_k: experts.min(2),
                routed: true,
                ..base.clone()
            }
        } else {
            ModelConfig {
                experts: 1,
                top_k: 1,
                routed: false,
                lora_rank: 2 * base.lora_rank,
                ..base.clone()
            }
        }
    }

    /// Whether a parameter of this role is averaged across clients.
    pub fn is_shared(self, role: &ParamRole, aggregate_non_routed: bool) -> bool {
        match role {
            ParamRole::Base | ParamRole::Router { .. } => false,
            ParamRole::Adapter => match self {
                Method::FedAvg => true,
                m if m.is_comigs() => aggregate_non_routed,
                _ => false,
            },
            ParamRole::Expert { expert, .. } => match self {
                Method::FedAvg | Method::Comigs2G => true,
                Method::Comigs1G1S | Method::Comigs1GXS => *expert == 0,
                _ => false,
            },
        }
    }

    /// Client-private trainable parameters: specialists and routers.
    pub fn is_private(self, role: &ParamRole, aggregate_non_routed: bool) -> bool {
        !matches!(role, ParamRole::Base) && !self.is_shared(role, aggregate_non_routed)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidConfig(format!("unknown method {s}; expected one of {}", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub method: Method,
    pub rounds: usize,
    pub local_iters: usize,
    /// Routed experts per client; its length fixes the client count.
    pub experts: Vec<usize>,
    /// Average plain (non-routed) adapters under the mixture methods.
    pub aggregate_non_routed: bool,
    /// Evaluate every this many rounds; zero evaluates the final round only.
    /// Round 0 and the final round are always evaluated.
    pub eval_every: usize,
    /// Leading test tokens used for the expert-score summary.
    pub score_tokens: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            method: Method::Comigs1G1S,
            rounds: 20,
            local_iters: 10,
            experts: vec![2, 2, 2, 2],
            aggregate_non_routed: true,
            eval_every: 1,
            score_tokens: 1024,
        }
    }
}

impl FederationConfig {
    pub fn clients(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::InvalidConfig("federation.experts must list one count per client".into()));
        }
        if let Some((i, _)) = self.experts.iter().enumerate().find(|(_, &n)| n == 0) {
            return Err(Error::InvalidConfig(format!("federation.experts[{i}] must be at least 1")));
        }
        let two_expert = matches!(self.method, Method::Comigs2G | Method::Comigs2S | Method::Comigs1G1S);
        if two_expert && self.experts.iter().any(|&n| n != 2) {
            return Err(Error::InvalidConfig(format!(
                "method {} requires exactly 2 experts per client, got {:?}",
                self.method, self.experts
            )));
        }
        Ok(())
    }

    fn evaluated(&self, round: usize) -> bool {
        round == 0 || round == self.rounds || (self.eval_every > 0 && round.is_multiple_of(self.eval_every))
    }

    fn shared(&self) -> impl Fn(&ParamRole) -> bool + '_ {
        move |r| self.method.is_shared(r, self.aggregate_non_routed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Round 0, before any fine-tuning.
    Initial,
    /// After local training, before the end-of-round aggregation; the
    /// parameters each client actually holds.
    Local,
    /// After averaging the final uploads.
    Aggregated,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Local => "local",
            Stage::Aggregated => "aggregated",
        }
    }
}

/// Evaluation of one client at one point in the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub test_ppl: f64,
    pub bytes_up: usize,
    pub bytes_down: usize,
    /// Mean router probability per expert, per routed layer.
    pub expert_scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub stage: Stage,
    pub clients: Vec<ClientMetrics>,
}

impl RoundMetrics {
    pub fn mean_ppl(&self) -> f64 {
        self.clients.iter().map(|c| c.test_ppl).sum::<f64>() / self.clients.len() as f64
    }
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub metrics: Vec<RoundMetrics>,
    /// Final client models (one for centralized training).
    pub models: Vec<TinyLm>,
    pub logs: Vec<Vec<IterationLog>>,
    pub channel: ExchangeChannel,
}

impl Experiment {
    /// Headline metrics: the last evaluation of the parameters clients hold.
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.metrics
            .iter()
            .rev()
            .find(|m| m.stage != Stage::Aggregated)
            .expect("round 0 is always evaluated")
    }
}

/// One simulated client: its model, optimizer state and data.
#[derive(Debug)]
pub struct ClientState<'a> {
    pub id: usize,
    pub model: TinyLm,
    pub state: BilevelState,
    pub valid_cursor: CyclicWindows,
    pub corpus: &'a ClientCorpus,
}

impl ClientState<'_> {
    fn train_round(&mut self, trainer: &TrainerConfig, iters: usize, seed: u64, round: usize) -> Result<()> {
        let window = self.model.config().context + 1;
        let mut source = StreamBatches {
            train: &self.corpus.train,
            valid: &self.corpus.valid,
            window,
            batch_size: trainer.batch_size,
            rng: name_rng(seed, &format!("train.client{}.round{round}", self.id)),
            valid_cursor: &mut self.valid_cursor,
        };
        local_train(&mut self.model, &mut self.state, trainer, &mut source, iters)
    }
}

fn evaluate(model: &TinyLm, test: &[usize], score_tokens: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let ppl = model.perplexity(test)?;
    let scores = if model.routed_layers() == 0 || score_tokens == 0 {
        Vec::new()
    } else {
        let probe = &test[..score_tokens.min(test.len())];
        expert_score_summary(&model.routing_records(probe)?)?.into_values().collect()
    };
    Ok((ppl, scores))
}

/// Pretrains base weights on the pooled training streams of all clients.
pub fn pretrain_base(model: &ModelConfig, corpora: &[ClientCorpus], pcfg: &PretrainConfig, seed: u64) -> Result<ParamStore> {
    let streams: Vec<&[usize]> = corpora.iter().map(|c| c.train.as_slice()).collect();
    Ok(pretrain(model, seed, &streams, pcfg)?.base)
}

/// Averages the shared parameters held by `models` in place, logging both
/// directions on `channel`.
pub fn aggregate_generalists(
    models: &mut [TinyLm],
    shared: &dyn Fn(&ParamRole) -> bool,
    channel: &mut ExchangeChannel,
    round: usize,
) -> Result<()> {
    for (i, m) in models.iter().enumerate() {
        channel.upload(round, i, m.params(), shared);
    }
    let mean = channel.aggregate()?;
    for (i, m) in models.iter_mut().enumerate() {
        channel.download(round, i, m.params_mut(), &mean)?;
    }
    Ok(())
}

/// One communication round: clients download the mean of the previous
/// round's uploads, train locally in parallel and upload their shared
/// parameters. Returns the evaluation of the locally trained models when
/// the round is scheduled for evaluation.
pub fn run_round(
    clients: &mut [ClientState],
    fed: &FederationConfig,
    trainer: &TrainerConfig,
    channel: &mut ExchangeChannel,
    round: usize,
    seed: u64,
) -> Result<Option<RoundMetrics>> {
    if channel.has_pending() {
        let mean = channel.aggregate()?;
        for c in clients.iter_mut() {
            channel.download(round, c.id, c.model.params_mut(), &mean)?;
        }
    }
    clients
        .par_iter_mut()
        .map(|c| c.train_round(trainer, fed.local_iters, seed, round))
        .collect::<Result<Vec<()>>>()?;
    let shared = fed.shared();
    let any_shared = clients
        .first()
        .is_some_and(|c| c.model.params().entries().iter().any(|e| shared(&e.role)));
    if any_shared {
        for c in clients.iter() {
            channel.upload(round, c.id, c.model.params(), &shared);
        }
    }
    if fed.evaluated(round) {
        eval_round(clients, fed, channel, round, Stage::Local).map(Some)
    } else {
        Ok(None)
    }
}

/// Runs the configured method from the pretrained `base` weights.
pub fn run_experiment(
    fed: &FederationConfig,
    model: &ModelConfig,
    trainer: &TrainerConfig,
    corpora: &[ClientCorpus],
    base: &ParamStore,
    seed: u64,
) -> Result<Experiment> {
    fed.validate()?;
    trainer.validate()?;
    if corpora.len() != fed.clients() {
        return Err(Error::InvalidConfig(format!(
            "{} corpora for {} clients",
            corpora.len(),
            fed.clients()
        )));
    }
    let window = model.context + 1;
    for c in corpora {
        for (what, s) in [("train", &c.train), ("valid", &c.valid)] {
            if s.len() < window {
                return Err(Error::TooShort {
                    what: if what == "train" { "train stream" } else { "valid stream" },
                    len: s.len(),
                    min: window,
                });
            }
        }
    }
    if fed.method == Method::Centralized {
        return run_centralized(fed, model, trainer, corpora, base, seed);
    }

    let total = fed.rounds * fed.local_iters;
    let mut clients: Vec<ClientState> = corpora
        .iter()
        .enumerate()
        .map(|(i, corpus)| {
            let cfg = fed.method.client_model(model, fed.experts[i]);
            Ok(ClientState {
                id: i,
                model: TinyLm::from_base(&cfg, seed, base)?,
                state: BilevelState::new(trainer, total),
                valid_cursor: CyclicWindows::new(window),
                corpus,
            })
        })
        .collect::<Result<_>>()?;

    let mut channel = ExchangeChannel::new();
    let mut metrics = vec![eval_round(&clients, fed, &channel, 0, Stage::Initial)?];
    if fed.method == Method::Pretrained {
        return Ok(finish(clients, metrics, channel));
    }
    for round in 1..=fed.rounds {
        if let Some(m) = run_round(&mut clients, fed, trainer, &mut channel, round, seed)? {
            metrics.push(m);
        }
    }
    if channel.has_pending() {
        let mean = channel.peek_aggregate()?;
        let mut scratch = ExchangeChannel::new();
        let mut post = Vec::with_capacity(clients.len());
        for c in &clients {
            let mut model = c.model.clone();
            scratch.download(fed.rounds, c.id, model.params_mut(), &mean)?;
            post.push(model);
        }
        let views: Vec<_> = clients.iter().zip(&post).map(|(c, m)| (c.id, m, c.corpus)).collect();
        metrics.push(eval_models(&views, fed, &channel, fed.rounds, Stage::Aggregated)?);
    }
    Ok(finish(clients, metrics, channel))
}

fn finish(clients: Vec<ClientState>, metrics: Vec<RoundMetrics>, channel: ExchangeChannel) -> Experiment {
    let (models, logs) = clients.into_iter().map(|c| (c.model, c.state.log)).unzip();
    Experiment {
        metrics,
        models,
        logs,
        channel,
    }
}

fn eval_round(
    clients: &[ClientState],
    fed: &FederationConfig,
    channel: &ExchangeChannel,
    round: usize,
    stage: Stage,
) -> Result<RoundMetrics> {
    let views: Vec<_> = clients.iter().map(|c| (c.id, &c.model, c.corpus)).collect();
    eval_models(&views, fed, channel, round, stage)
}

fn eval_models(
    views: &[(usize, &TinyLm, &ClientCorpus)],
    fed: &FederationConfig,
    channel: &ExchangeChannel,
    round: usize,
    stage: Stage,
) -> Result<RoundMetrics> {
    let clients = views
        .par_iter()
        .map(|&(id, model, corpus)| {
            let (test_ppl, expert_scores) = evaluate(model, &corpus.test, fed.score_tokens)?;
            Ok(ClientMetrics {
                client: id,
                test_ppl,
                bytes_up: channel.bytes(round, id, Direction::Up),
                bytes_down: channel.bytes(round, id, Direction::Down),
                expert_scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundMetrics { round, stage, clients })
}

/// Pooled batches for a single model: `N` windows from each client's
/// stream per batch.
struct PooledBatches<'a> {
    corpora: &'a [ClientCorpus],
    window: usize,
    batch_size: usize,
    rng: rand_chacha::ChaCha8Rng,
    cursors: &'a mut [CyclicWindows],
}

impl crate::trainer::BatchSource<Vec<Vec<usize>>> for PooledBatches<'_> {
    fn train_batch(&mut self) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(self.batch_size * self.corpora.len());
        for c in self.corpora {
            out.extend(crate::batch::random_windows(
                &mut self.rng,
                &[&c.train],
                self.window,
                self.batch_size,
            )?);
        }
        Ok(out)
    }

    fn valid_batch(&mut self) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(self.batch_size * self.corpora.len());
        for (c, cur) in self.corpora.iter().zip(self.cursors.iter_mut()) {
            out.extend(cur.next_batch(&c.valid, self.batch_size)?);
        }
        Ok(out)
    }
}

fn run_centralized(
    fed: &FederationConfig,
    model: &ModelConfig,
    trainer: &TrainerConfig,
    corpora: &[ClientCorpus],
    base: &ParamStore,
    seed: u64,
) -> Result<Experiment> {
    let cfg = fed.method.client_model(model, 1);
    let mut lm = TinyLm::from_base(&cfg, seed, base)?;
    let mut state = BilevelState::new(trainer, fed.rounds * fed.local_iters);
    let window = cfg.context + 1;
    let mut cursors = vec![CyclicWindows::new(window); corpora.len()];
    let channel = ExchangeChannel::new();
    let eval = |lm: &TinyLm, round: usize, stage: Stage| -> Result<RoundMetrics> {
        let clients = corpora
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let (test_ppl, expert_scores) = evaluate(lm, &c.test, fed.score_tokens)?;
                Ok(ClientMetrics {
                    client: i,
                    test_ppl,
                    bytes_up: 0,
                    bytes_down: 0,
                    expert_scores,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RoundMetrics { round, stage, clients })
    };
    let mut metrics = vec![eval(&lm, 0, Stage::Initial)?];
    for round in 1..=fed.rounds {
        let mut source = PooledBatches {
            corpora,
            window,
            batch_size: trainer.batch_size,
            rng: name_rng(seed, &format!("train.centralized.round{round}")),
            cursors: &mut cursors,
        };
        local_train(&mut lm, &mut state, trainer, &mut source, fed.local_iters)?;
        if fed.evaluated(round) {
            metrics.push(eval(&lm, round, Stage::Local)?);
        }
    }
    Ok(Experiment {
        metrics,
        models: vec![lm],
        logs: vec![state.log],
        channel,
    })
}

/// Per-client communication of one round for a method, against FedAvg on
/// the same base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommCost {
    pub method: Method,
    /// Scalars sent in one direction.
    pub params_exchanged: usize,
    /// Upload plus download.
    pub bytes_per_round: usize,
    pub fedavg_bytes_per_round: usize,
    pub ratio: f64,
}

/// Parameter-counting communication cost of client 0. Centralized and
/// pretrained runs exchange nothing.
pub fn comm_bytes_per_round(fed: &FederationConfig, model: &ModelConfig) -> Result<CommCost> {
    fed.validate()?;
    let count = |method: Method, experts: usize| -> Result<usize> {
        let lm = TinyLm::new(&method.client_model(model, experts), 0)?;
        Ok(lm.params().numel(|r| method.is_shared(r, fed.aggregate_non_routed)))
    };
    let params = match fed.method {
        Method::Pretrained | Method::Centralized => 0,
        m => count(m, fed.experts[0])?,
    };
    let fedavg = count(Method::FedAvg, 1)?;
    let bytes = |p: usize| p * BYTES_PER_SCALAR * 2;
    Ok(CommCost {
        method: fed.method,
        params_exchanged: params,
        bytes_per_round: bytes(params),
        fedavg_bytes_per_round: bytes(fedavg),
        ratio: params as f64 / fedavg as f64,
    })
}
