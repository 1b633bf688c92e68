//! The four subcommands as library functions; `main` only parses flags,
//! sets up the thread pool and maps results to exit codes.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use comigs_convex::suite::{decoupled_suite, identity_suite, quadratic_suite, DecoupledReport, IdentityReport, QuadraticReport};
use comigs_core::data::{generate, read_corpora, write_corpora, ClientCorpus, CorpusHeader};
use comigs_core::federation::{comm_bytes_per_round, pretrain_base, run_experiment, Direction, Method, Stage};
use comigs_core::model::RoutingDumpEntry;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::*;

/// Prepares `cfg.out` and writes the config snapshot.
fn start_run(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join(CONFIG_SNAPSHOT), cfg.to_toml()?)?;
    Ok(())
}

fn finish_run(cfg: &RunConfig, data_sha256: Option<String>) -> Result<Manifest> {
    let manifest = Manifest::collect(&cfg.out, cfg.content_hash()?, data_sha256)?;
    manifest.write(&cfg.out)?;
    Ok(manifest)
}

/// Generated or read corpora, checked against the model and client count.
pub fn load_corpora(cfg: &RunConfig) -> Result<Vec<ClientCorpus>> {
    let corpora = match &cfg.data_dir {
        Some(dir) => {
            let (header, corpora) = read_corpora(dir).with_context(|| format!("reading corpora from {}", dir.display()))?;
            ensure!(
                header.vocab_size == cfg.model.vocab_size,
                "corpus vocabulary {} differs from model.vocab_size {}",
                header.vocab_size,
                cfg.model.vocab_size
            );
            corpora
        }
        None => generate(&cfg.data, cfg.seed)?,
    };
    ensure!(
        corpora.len() == cfg.federation.clients(),
        "{} client corpora for {} entries of federation.experts",
        corpora.len(),
        cfg.federation.clients()
    );
    Ok(corpora)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: usize,
    pub test_ppl: f64,
}

/// Headline results of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    /// Round of the headline evaluation.
    pub final_round: usize,
    pub final_stage: Stage,
    pub clients: Vec<ClientSummary>,
    pub mean_test_ppl: f64,
    pub total_bytes_up: usize,
    pub total_bytes_down: usize,
    pub config_sha256: String,
    pub data_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRouting {
    pub client: usize,
    pub entries: Vec<RoutingDumpEntry>,
}

/// Pretrains, runs the configured method and writes the run directory.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let corpora = load_corpora(cfg)?;
    start_run(cfg)?;
    let data_sha256 = corpus_hash(&corpora);
    log::info!("pretraining base model ({} steps)", cfg.pretrain.steps);
    let base = pretrain_base(&cfg.model, &corpora, &cfg.pretrain, cfg.seed)?;
    log::info!("running {} for {} rounds", cfg.federation.method, cfg.federation.rounds);
    let exp = run_experiment(&cfg.federation, &cfg.model, &cfg.trainer, &corpora, &base, cfg.seed)?;
    let out = &cfg.out;

    write_csv(&out.join(METRICS_CSV), &METRICS_COLUMNS, &metrics_rows(&exp.metrics))?;
    write_csv(
        &out.join(EXPERT_SCORES_CSV),
        &EXPERT_SCORES_COLUMNS,
        &expert_score_rows(&exp.metrics),
    )?;
    write_json(&out.join(EXPERT_SCORES_JSON), &exp.metrics)?;
    write_csv(&out.join(TRAIN_LOG_CSV), &TRAIN_LOG_COLUMNS, &train_log_rows(&exp.logs))?;

    let probe = cfg.federation.score_tokens;
    let mut routing = Vec::new();
    for (client, model) in exp.models.iter().enumerate() {
        let entries = if model.routed_layers() == 0 || probe == 0 {
            Vec::new()
        } else {
            let test = &corpora[client.min(corpora.len() - 1)].test;
            model.routing_dump(&test[..probe.min(test.len())])?
        };
        routing.push(ClientRouting { client, entries });
    }
    write_json(&out.join(ROUTING_JSON), &routing)?;

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    for (client, model) in exp.models.iter().enumerate() {
        model
            .params()
            .to_checkpoint()
            .save(&ckpt_dir.join(format!("client{client}.json")))?;
    }

    let last = exp.final_metrics();
    let total_bytes = |d: Direction| -> usize { exp.channel.transfers().iter().filter(|t| t.direction == d).map(|t| t.bytes).sum() };
    let summary = TrainSummary {
        method: cfg.federation.method,
        seed: cfg.seed,
        rounds: cfg.federation.rounds,
        final_round: last.round,
        final_stage: last.stage,
        clients: last
            .clients
            .iter()
            .map(|c| ClientSummary {
                client: c.client,
                test_ppl: c.test_ppl,
            })
            .collect(),
        mean_test_ppl: last.mean_ppl(),
        total_bytes_up: total_bytes(Direction::Up),
        total_bytes_down: total_bytes(Direction::Down),
        config_sha256: cfg.content_hash()?,
        data_sha256: data_sha256.clone(),
    };
    write_json(&out.join(SUMMARY_JSON), &summary)?;
    finish_run(cfg, Some(data_sha256))?;
    Ok(summary)
}

/// All convex suites of one `verify-convex` run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexReport {
    pub seed: u64,
    pub quadratic: QuadraticReport,
    pub identity: IdentityReport,
    pub decoupled: DecoupledReport,
    pub passed: bool,
}

/// Runs the quadratic, identity and decoupled suites and writes the report.
pub fn verify_convex(cfg: &RunConfig) -> Result<ConvexReport> {
    cfg.convex.validate()?;
    start_run(cfg)?;
    let c = &cfg.convex;
    let extra = c.extra_quadratic.iter().map(|q| q.build()).collect::<Result<Vec<_>>>()?;
    log::info!("quadratic contraction on {} instances", c.quadratic_instances + extra.len());
    let quadratic = quadratic_suite(cfg.seed, c.quadratic_instances, c.quadratic_max_dim, c.quadratic_sweeps, &extra)?;
    let suite = c.suite();
    log::info!("router-weight identity on {} instances", c.identity_instances);
    let identity = identity_suite(cfg.seed.wrapping_add(1), c.identity_instances, &suite)?;
    log::info!("decoupled rate certification on {} instances", c.decoupled_instances);
    let decoupled = decoupled_suite(cfg.seed.wrapping_add(2), &suite)?;
    let report = ConvexReport {
        seed: cfg.seed,
        passed: quadratic.passed && identity.passed && decoupled.passed,
        quadratic,
        identity,
        decoupled,
    };
    write_json(&cfg.out.join(CONVEX_REPORT_JSON), &report)?;
    finish_run(cfg, None)?;
    Ok(report)
}

/// Communication cost of every method that is valid for the configured
/// expert counts.
pub fn commcost(cfg: &RunConfig) -> Result<Vec<CommCostRow>> {
    cfg.model.validate()?;
    let mut rows = Vec::new();
    for method in Method::ALL {
        let mut fed = cfg.federation.clone();
        fed.method = method;
        if fed.validate().is_err() {
            log::warn!("skipping {method}: not defined for experts {:?}", fed.experts);
            continue;
        }
        rows.push(CommCostRow::from(&comm_bytes_per_round(&fed, &cfg.model)?));
    }
    Ok(rows)
}

/// Fixed-width table of [`commcost`] rows.
pub fn commcost_table(rows: &[CommCostRow]) -> String {
    let mut s = format!(
        "{:<14} {:>16} {:>16} {:>16} {:>8}\n",
        "method", "params/round", "bytes/round", "fedavg bytes", "ratio"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:>16} {:>16} {:>16} {:>8.4}\n",
            r.method, r.params_exchanged, r.bytes_per_round, r.fedavg_bytes_per_round, r.ratio
        ));
    }
    s
}

/// Writes `commcost.csv` and the manifest into `cfg.out`.
pub fn write_commcost(cfg: &RunConfig, rows: &[CommCostRow]) -> Result<()> {
    start_run(cfg)?;
    write_csv(&cfg.out.join(COMMCOST_CSV), &COMMCOST_COLUMNS, rows)?;
    finish_run(cfg, None)?;
    Ok(())
}

/// Generates the configured corpora and stores them in `dir`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<CorpusHeader> {
    cfg.data.validate()?;
    let corpora = generate(&cfg.data, cfg.seed)?;
    Ok(write_corpora(dir, &corpora, &cfg.data, cfg.seed)?)
}
