//! Synthetic Markov-chain corpora with controllable heterogeneity.
//!
//! The vocabulary splits into shared "function" tokens and one block of
//! content tokens per category. The transition row of state `s` under
//! category `c` is `w·S(s) + (1−w)·C_c(s)`, where `S(s)` is a distribution
//! over shared tokens common to every category and `C_c(s)` a distribution
//! over category `c`'s content tokens. Both are peaked Dirichlet draws, so
//! `w` dials heterogeneity from disjoint (`w = 0`) to identical (`w = 1`).

mod io;

pub use io::{read_corpora, write_corpora, CorpusHeader};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::name_rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Valid and test follow each client's own category.
    #[default]
    InDistribution,
    /// Valid and test are a uniform mixture of all categories.
    OutOfDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub shared_tokens: usize,
    pub clients: usize,
    /// Weight `w` of the shared component in every transition row.
    pub shared_weight: f64,
    /// Dirichlet concentration of transition rows; small values give
    /// peaked, predictable chains.
    pub concentration: f64,
    pub train_len: usize,
    pub valid_len: usize,
    pub test_len: usize,
    /// Per-client multipliers of `train_len`; empty means all ones.
    pub train_scale: Vec<usize>,
    /// Segment length of the mixed out-of-distribution streams.
    pub segment_len: usize,
    pub mode: SplitMode,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            shared_tokens: 16,
            clients: 4,
            shared_weight: 0.5,
            concentration: 0.3,
            train_len: 50_000,
            valid_len: 5_000,
            test_len: 5_000,
            train_scale: Vec::new(),
            segment_len: 64,
            mode: SplitMode::InDistribution,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidConfig("data.clients must be at least 1".into()));
        }
        if self.shared_tokens == 0 || self.shared_tokens + self.clients > self.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "data.vocab_size {} cannot hold {} shared tokens and {} categories",
                self.vocab_size, self.shared_tokens, self.clients
            )));
        }
        if !(0.0..=1.0).contains(&self.shared_weight) {
            return Err(Error::InvalidConfig("data.shared_weight must lie in [0, 1]".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::InvalidConfig("data.concentration must be positive".into()));
        }
        if !self.train_scale.is_empty() && self.train_scale.len() != self.clients {
            return Err(Error::InvalidConfig(format!(
                "data.train_scale has {} entries for {} clients",
                self.train_scale.len(),
                self.clients
            )));
        }
        if self.segment_len == 0 {
            return Err(Error::InvalidConfig("data.segment_len must be at least 1".into()));
        }
        for (name, len) in [("valid_len", self.valid_len), ("test_len", self.test_len)] {
            if len < 2 {
                return Err(Error::InvalidConfig(format!("data.{name} must be at least 2")));
            }
        }
        Ok(())
    }

    /// Per-client training lengths.
    pub fn train_lengths(&self) -> Result<Vec<usize>> {
        if self.train_scale.is_empty() {
            quantity_profile(self.train_len, &vec![1; self.clients])
        } else {
            quantity_profile(self.train_len, &self.train_scale)
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// One category per client, content tokens split evenly after the
    /// shared block.
    pub fn category_specs(&self, seed: u64) -> Result<Vec<CategorySpec>> {
        self.validate()?;
        let v = self.vocab_size;
        let shared: Vec<usize> = (0..self.shared_tokens).collect();
        let per = (v - self.shared_tokens) / self.clients;
        let shared_rows: Vec<Vec<f64>> = (0..v)
            .map(|s| dirichlet(&mut name_rng(seed, &format!("data.shared.{s}")), shared.len(), self.concentration))
            .collect();
        (0..self.clients)
            .map(|c| {
                let content: Vec<usize> = (self.shared_tokens + c * per..self.shared_tokens + (c + 1) * per).collect();
                let mut transition = vec![0.0; v * v];
                for s in 0..v {
                    let mut rng = name_rng(seed, &format!("data.category{c}.{s}"));
                    let own = dirichlet(&mut rng, content.len(), self.concentration);
                    let row = &mut transition[s * v..(s + 1) * v];
                    for (&t, p) in shared.iter().zip(&shared_rows[s]) {
                        row[t] += self.shared_weight * p;
                    }
                    for (&t, p) in content.iter().zip(&own) {
                        row[t] += (1.0 - self.shared_weight) * p;
                    }
                }
                CategorySpec::new(v, shared.clone(), content, self.shared_weight, transition)
            })
            .collect()
    }
}

/// Positive per-client training lengths `base · factor`.
pub fn quantity_profile(base: usize, factors: &[usize]) -> Result<Vec<usize>> {
    if factors.is_empty() {
        return Err(Error::Empty("quantity profile"));
    }
    factors
        .iter()
        .map(|&f| {
            let len = base * f;
            if len == 0 {
                Err(Error::InvalidConfig("training length must be positive".into()))
            } else {
                Ok(len)
            }
        })
        .collect()
}

fn dirichlet<R: Rng>(rng: &mut R, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        v.iter_mut().for_each(|x| *x = 1.0 / n as f64);
    }
    v
}

/// One category's Markov chain.
#[derive(Clone, Debug, PartialEq)]
pub struct CategorySpec {
    pub vocab_size: usize,
    pub shared: Vec<usize>,
    pub content: Vec<usize>,
    pub shared_weight: f64,
    /// Row-stochastic, `vocab_size × vocab_size`, row-major.
    pub transition: Vec<f64>,
}

impl CategorySpec {
    pub fn new(vocab_size: usize, shared: Vec<usize>, content: Vec<usize>, shared_weight: f64, transition: Vec<f64>) -> Result<Self> {
        let spec = Self {
            vocab_size,
            shared,
            content,
            shared_weight,
            transition,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.transition[s * self.vocab_size..(s + 1) * self.vocab_size]
    }

    fn validate(&self) -> Result<()> {
        let v = self.vocab_size;
        if self.transition.len() != v * v {
            return Err(Error::ShapeMismatch {
                what: "transition matrix".into(),
                expected: vec![v, v],
                found: vec![self.transition.len()],
            });
        }
        if self.shared.iter().any(|t| self.content.contains(t)) {
            return Err(Error::Degenerate("shared and content tokens overlap".into()));
        }
        for s in 0..v {
            let row = self.row(s);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Degenerate(format!("transition row {s} is not a distribution")));
            }
            if row[s] >= 1.0 {
                return Err(Error::Degenerate(format!("state {s} is absorbing")));
            }
        }
        Ok(())
    }

    /// Stationary distribution by power iteration on the lazy chain
    /// `(P + I)/2`, which shares it and cannot oscillate.
    pub fn stationary(&self) -> Vec<f64> {
        let v = self.vocab_size;
        let mut pi = vec![1.0 / v as f64; v];
        for _ in 0..100_000 {
            let mut next = vec![0.0; v];
            for (s, &p) in pi.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (n, &q) in next.iter_mut().zip(self.row(s)) {
                    *n += p * q;
                }
            }
            let mut delta = 0.0;
            for (n, &p) in next.iter_mut().zip(&pi) {
                *n = 0.5 * (*n + p);
                delta += (*n - p).abs();
            }
            pi = next;
            if delta < 1e-14 {
                break;
            }
        }
        pi
    }

    fn sampler(&self) -> Vec<Option<WeightedIndex<f64>>> {
        (0..self.vocab_size).map(|s| WeightedIndex::new(self.row(s)).ok()).collect()
    }

    /// `len` tokens started from a stationary draw.
    pub fn sample<R: Rng>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        let rows = self.sampler();
        let start = WeightedIndex::new(self.stationary()).expect("stationary is a distribution");
        let mut out = Vec::with_capacity(len);
        let first = start.sample(rng);
        self.extend(rng, &rows, first, len, &mut out);
        out
    }

    fn extend<R: Rng>(&self, rng: &mut R, rows: &[Option<WeightedIndex<f64>>], start: usize, len: usize, out: &mut Vec<usize>) {
        if len == 0 {
            return;
        }
        let mut s = start;
        out.push(s);
        for _ in 1..len {
            s = rows[s].as_ref().expect("validated row").sample(rng);
            out.push(s);
        }
    }
}

/// Train, validation and test streams of one client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientCorpus {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub mode: SplitMode,
}

/// Streams made of `segment_len`-token segments cycling through all
/// categories, each segment restarted from a stationary draw.
fn mixed_stream<R: Rng>(rng: &mut R, specs: &[CategorySpec], len: usize, segment_len: usize, offset: usize) -> Vec<usize> {
    let samplers: Vec<_> = specs.iter().map(|s| s.sampler()).collect();
    let starts: Vec<_> = specs
        .iter()
        .map(|s| WeightedIndex::new(s.stationary()).expect("stationary is a distribution"))
        .collect();
    let mut out = Vec::with_capacity(len);
    let mut k = offset;
    while out.len() < len {
        let c = k % specs.len();
        let n = segment_len.min(len - out.len());
        let start = starts[c].sample(rng);
        specs[c].extend(rng, &samplers[c], start, n, &mut out);
        k += 1;
    }
    out
}

/// Generates every client's corpus. Deterministic in `seed`; each stream
/// has its own RNG so lengths of one stream do not perturb another.
pub fn generate(config: &CorpusConfig, seed: u64) -> Result<Vec<ClientCorpus>> {
    let specs = config.category_specs(seed)?;
    generate_from_specs(&specs, config, seed)
}

pub fn generate_from_specs(specs: &[CategorySpec], config: &CorpusConfig, seed: u64) -> Result<Vec<ClientCorpus>> {
    config.validate()?;
    if specs.len() != config.clients {
        return Err(Error::InvalidConfig(format!(
            "{} category specs for {} clients",
            specs.len(),
            config.clients
        )));
    }
    let lengths = config.train_lengths()?;
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let rng = |split: &str| name_rng(seed, &format!("data.client{i}.{split}"));
            let train = spec.sample(&mut rng("train"), lengths[i]);
            let (valid, test) = match config.mode {
                SplitMode::InDistribution => (
                    spec.sample(&mut rng("valid"), config.valid_len),
                    spec.sample(&mut rng("test"), config.test_len),
                ),
                SplitMode::OutOfDistribution => (
                    mixed_stream(&mut rng("valid.mixed"), specs, config.valid_len, config.segment_len, i),
                    mixed_stream(&mut rng("test.mixed"), specs, config.test_len, config.segment_len, i),
                ),
            };
            ClientCorpus {
                train,
                valid,
                test,
                mode: config.mode,
            }
        })
        .collect())
}

/// Normalized token frequencies.
pub fn histogram(stream: &[usize], vocab_size: usize) -> Vec<f64> {
    let mut h = vec![0.0; vocab_size];
    for &t in stream {
        h[t] += 1.0;
    }
    let n = stream.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 { a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum() };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

#[cfg(test)]
mod tests;
