//! Run-directory files: CSV tables with fixed schemas, JSON reports and the
//! SHA-256 manifest.
//!
//! | file | columns |
//! |---|---|
//! | `metrics.csv` | round, client, stage, test_ppl, bytes_up, bytes_down |
//! | `expert_scores.csv` | round, stage, client, layer, expert, score |
//! | `train_log.csv` | client, iteration, train_loss, valid_loss, generalist_score |
//! | `commcost.csv` | method, params_exchanged, bytes_per_round, fedavg_bytes_per_round, ratio |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use comigs_core::data::ClientCorpus;
use comigs_core::federation::{CommCost, RoundMetrics};
use comigs_core::trainer::IterationLog;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const METRICS_CSV: &str = "metrics.csv";
pub const EXPERT_SCORES_CSV: &str = "expert_scores.csv";
pub const EXPERT_SCORES_JSON: &str = "expert_scores.json";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const COMMCOST_CSV: &str = "commcost.csv";
pub const ROUTING_JSON: &str = "routing.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONVEX_REPORT_JSON: &str = "convex_report.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub const METRICS_COLUMNS: [&str; 6] = ["round", "client", "stage", "test_ppl", "bytes_up", "bytes_down"];
pub const EXPERT_SCORES_COLUMNS: [&str; 6] = ["round", "stage", "client", "layer", "expert", "score"];
pub const TRAIN_LOG_COLUMNS: [&str; 5] = ["client", "iteration", "train_loss", "valid_loss", "generalist_score"];
pub const COMMCOST_COLUMNS: [&str; 5] = ["method", "params_exchanged", "bytes_per_round", "fedavg_bytes_per_round", "ratio"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub client: usize,
    pub stage: String,
    pub test_ppl: f64,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertScoreRow {
    pub round: usize,
    pub stage: String,
    pub client: usize,
    pub layer: usize,
    pub expert: usize,
    /// Mean router probability of the expert over the probe tokens.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub client: usize,
    pub iteration: usize,
    pub train_loss: f64,
    /// Empty until the first router update.
    pub valid_loss: Option<f64>,
    /// Mean over routed layers of the generalist's router probability;
    /// empty for unrouted models.
    pub generalist_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommCostRow {
    pub method: String,
    pub params_exchanged: usize,
    pub bytes_per_round: usize,
    pub fedavg_bytes_per_round: usize,
    pub ratio: f64,
}

impl From<&CommCost> for CommCostRow {
    fn from(c: &CommCost) -> Self {
        Self {
            method: c.method.name().to_string(),
            params_exchanged: c.params_exchanged,
            bytes_per_round: c.bytes_per_round,
            fedavg_bytes_per_round: c.fedavg_bytes_per_round,
            ratio: c.ratio,
        }
    }
}

pub fn metrics_rows(metrics: &[RoundMetrics]) -> Vec<MetricsRow> {
    metrics
        .iter()
        .flat_map(|m| {
            m.clients.iter().map(move |c| MetricsRow {
                round: m.round,
                client: c.client,
                stage: m.stage.name().to_string(),
                test_ppl: c.test_ppl,
                bytes_up: c.bytes_up,
                bytes_down: c.bytes_down,
            })
        })
        .collect()
}

pub fn expert_score_rows(metrics: &[RoundMetrics]) -> Vec<ExpertScoreRow> {
    let mut rows = Vec::new();
    for m in metrics {
        for c in &m.clients {
            for (layer, scores) in c.expert_scores.iter().enumerate() {
                for (expert, &score) in scores.iter().enumerate() {
                    rows.push(ExpertScoreRow {
                        round: m.round,
                        stage: m.stage.name().to_string(),
                        client: c.client,
                        layer,
                        expert,
                        score,
                    });
                }
            }
        }
    }
    rows
}

pub fn train_log_rows(logs: &[Vec<IterationLog>]) -> Vec<TrainLogRow> {
    logs.iter()
        .enumerate()
        .flat_map(|(client, log)| {
            log.iter().map(move |l| TrainLogRow {
                client,
                iteration: l.iteration,
                train_loss: l.train_loss,
                valid_loss: l.valid_loss,
                generalist_score: if l.generalist_scores.is_empty() {
                    None
                } else {
                    Some(l.generalist_scores.iter().sum::<f64>() / l.generalist_scores.len() as f64)
                },
            })
        })
        .collect()
}

/// Writes `rows` with the given header. The header is written even when
/// there are no rows, so every file parses against its schema.
pub fn write_csv<T: Serialize>(path: &Path, columns: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(columns)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`], checking the header first.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, columns: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    anyhow::ensure!(header == columns, "{}: header {header:?}, expected {columns:?}", path.display());
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>();
    rows.with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Hash of every token of every split, in client order.
pub fn corpus_hash(corpora: &[ClientCorpus]) -> String {
    let mut h = Sha256::new();
    for c in corpora {
        for split in [&c.train, &c.valid, &c.test] {
            h.update((split.len() as u64).to_le_bytes());
            for &t in split.iter() {
                h.update((t as u32).to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Content hashes of a run's inputs and of every file it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub data_sha256: Option<String>,
    /// Relative path to SHA-256 of the file contents.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    /// Hashes every regular file under `dir` except the manifest itself.
    pub fn collect(dir: &Path, config_sha256: String, data_sha256: Option<String>) -> Result<Self> {
        let mut files = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
                if rel != MANIFEST_JSON {
                    files.insert(rel, sha256_file(&path)?);
                }
            }
        }
        Ok(Self {
            config_sha256,
            data_sha256,
            files,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_JSON), self)
    }
}
