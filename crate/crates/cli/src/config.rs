//! Run configuration: a TOML file whose sections mirror the library
//! configuration types, plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use comigs_convex::decoupled::LossKind;
use comigs_convex::quadratic::QuadraticBilevel;
use comigs_convex::rate::CertifyConfig;
use comigs_convex::suite::DecoupledSuiteConfig;
use comigs_core::data::CorpusConfig;
use comigs_core::federation::FederationConfig;
use comigs_core::model::{ModelConfig, PretrainConfig};
use comigs_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Settings of the convex certification suites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexConfig {
    /// Random instances for the quadratic contraction check.
    pub quadratic_instances: usize,
    /// Largest Θ and Φ dimension of the quadratic instances.
    pub quadratic_max_dim: usize,
    /// Sweeps per quadratic instance.
    pub quadratic_sweeps: usize,
    /// Random instances for the decoupled rate certification.
    pub decoupled_instances: usize,
    /// Random instances for the router-weight identity.
    pub identity_instances: usize,
    /// Largest feature dimension `d` of the decoupled instances.
    pub max_dim: usize,
    /// Largest sample count `n` of the decoupled instances.
    pub max_samples: usize,
    /// Largest number of specialists `N`; instances have `N + 1` experts.
    pub max_specialists: usize,
    /// Per-sample loss of the decoupled instances.
    pub loss: LossKind,
    /// Decoupling penalty `μ`.
    pub mu_pen: f64,
    /// Sweeps checked against the rate envelope.
    pub iterations: usize,
    /// Random directions probed for the curvature range.
    pub curvature_trials: usize,
    /// Random points probed for strong convexity.
    pub convexity_trials: usize,
    /// Hand-specified quadratic instances checked alongside the random ones.
    pub extra_quadratic: Vec<QuadraticSpec>,
}

/// Row-major blocks of a quadratic instance; validated for symmetry and
/// positive definiteness before any run starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl QuadraticSpec {
    pub fn build(&self) -> Result<QuadraticBilevel> {
        Ok(QuadraticBilevel::from_rows(&self.a, &self.b, &self.c)?)
    }
}

impl ConvexConfig {
    pub fn suite(&self) -> DecoupledSuiteConfig {
        DecoupledSuiteConfig {
            instances: self.decoupled_instances,
            max_dim: self.max_dim,
            max_samples: self.max_samples,
            max_specialists: self.max_specialists,
            loss: self.loss,
            mu_pen: self.mu_pen,
            certify: CertifyConfig {
                iterations: self.iterations,
                curvature_trials: self.curvature_trials,
                convexity_trials: self.convexity_trials,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.quadratic_max_dim == 0 || self.max_dim == 0 || self.max_samples == 0 || self.max_specialists == 0 {
            bail!("convex dimensions (quadratic_max_dim, max_dim, max_samples, max_specialists) must be at least 1");
        }
        if !(self.mu_pen > 0.0 && self.mu_pen.is_finite()) {
            bail!("convex.mu_pen must be positive, got {}", self.mu_pen);
        }
        if self.iterations == 0 || self.curvature_trials == 0 || self.convexity_trials == 0 {
            bail!("convex.iterations, curvature_trials and convexity_trials must be at least 1");
        }
        for (i, q) in self.extra_quadratic.iter().enumerate() {
            q.build().with_context(|| format!("convex.extra_quadratic[{i}]"))?;
        }
        Ok(())
    }
}

impl Default for ConvexConfig {
    fn default() -> Self {
        Self {
            quadratic_instances: 100,
            quadratic_max_dim: 8,
            quadratic_sweeps: 50,
            decoupled_instances: 20,
            identity_instances: 50,
            max_dim: 4,
            max_samples: 20,
            max_specialists: 3,
            loss: LossKind::Quadratic,
            mu_pen: 1.0,
            iterations: 200,
            curvature_trials: 1000,
            convexity_trials: 500,
            extra_quadratic: Vec::new(),
        }
    }
}

/// Everything one command needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed of data generation, initialization and batching.
    pub seed: u64,
    /// Output directory.
    pub out: PathBuf,
    /// Read corpora from this directory instead of generating them.
    pub data_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub trainer: TrainerConfig,
    pub federation: FederationConfig,
    pub convex: ConvexConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data_dir: None,
            model: ModelConfig::default(),
            data: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            trainer: TrainerConfig::default(),
            federation: FederationConfig::default(),
            convex: ConvexConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML file; missing keys take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies a dotted override such as `trainer.tau=15`. The value is
    /// parsed as a TOML value, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut doc = toml::Value::try_from(&*self)?;
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| anyhow!("{} is not a section", parts[..i].join(".")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = doc.try_into().with_context(|| format!("applying override {key}"))?;
        Ok(())
    }

    /// Cross-section consistency and every section's own validation.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.trainer.validate()?;
        self.federation.validate()?;
        self.convex.validate()?;
        if self.data.vocab_size != self.model.vocab_size {
            bail!(
                "data.vocab_size {} differs from model.vocab_size {}",
                self.data.vocab_size,
                self.model.vocab_size
            );
        }
        if self.data_dir.is_none() && self.data.clients != self.federation.clients() {
            bail!(
                "data.clients {} differs from the {} entries of federation.experts",
                self.data.clients,
                self.federation.clients()
            );
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization, without the output
    /// directory, which does not affect results.
    pub fn content_hash(&self) -> Result<String> {
        let inputs = Self {
            out: PathBuf::new(),
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(inputs.to_toml()?.as_bytes())))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use comigs_core::federation::Method;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[federation]\nmethod = \"local\"\nrounds = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.federation.method, Method::Local);
        assert_eq!(cfg.federation.rounds, 3);
        assert_eq!(cfg.trainer, TrainerConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[trainer]\ntau_typo = 3\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn overrides_are_typed() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("trainer.tau=15").unwrap();
        cfg.apply_override("federation.experts=[1, 2, 4, 8]").unwrap();
        cfg.apply_override("federation.method=comigs-1gxs").unwrap();
        cfg.apply_override("data.mode=out_of_distribution").unwrap();
        cfg.apply_override("trainer.lb_weight=0.5").unwrap();
        assert_eq!(cfg.trainer.tau, 15);
        assert_eq!(cfg.federation.experts, vec![1, 2, 4, 8]);
        assert_eq!(cfg.federation.method, Method::Comigs1GXS);
        assert_eq!(cfg.trainer.lb_weight, 0.5);
        assert!(cfg.apply_override("trainer.tau=abc").is_err());
        assert!(cfg.apply_override("trainer.nope=1").is_err());
        assert!(cfg.apply_override("no_equals").is_err());
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.federation.experts = vec![2, 2];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.vocab_size = 32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_positive_definite_quadratic_is_rejected() {
        let cfg = RunConfig::from_toml("[[convex.extra_quadratic]]\na = [[1.0]]\nb = [[1.0]]\nc = [[2.0]]\n").unwrap();
        let err = format!("{:#}", cfg.validate().unwrap_err());
        assert!(err.contains("extra_quadratic[0]") && err.contains("positive definite"), "{err}");
        let ok = RunConfig::from_toml("[[convex.extra_quadratic]]\na = [[2.0, 0.0], [0.0, 2.0]]\nb = [[2.0]]\nc = [[1.0, 0.0]]\n").unwrap();
        ok.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        b.seed = 1;
        assert_ne!(a.content_hash().unwrap(), b.content_hash().unwrap());
    }
}
