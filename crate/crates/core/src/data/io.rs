//! Corpus persistence: one little-endian `u32` token file per stream plus a
//! JSON header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClientCorpus, CorpusConfig, SplitMode};
use crate::error::{Error, Result};

const HEADER: &str = "corpus.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub vocab_size: usize,
    pub seed: u64,
    /// SHA-256 of the generating configuration.
    pub spec_hash: String,
    pub mode: SplitMode,
    /// `[train, valid, test]` lengths per client.
    pub lengths: Vec<[usize; 3]>,
}

fn stream_path(dir: &Path, client: usize, split: &str) -> std::path::PathBuf {
    dir.join(format!("client{client}.{split}.bin"))
}

fn write_tokens(path: &Path, tokens: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for &t in tokens {
        let t = u32::try_from(t).map_err(|_| Error::TokenOutOfRange {
            token: t,
            vocab: u32::MAX as usize,
        })?;
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_tokens(path: &Path, expected: usize, vocab: usize) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::ShapeMismatch {
            what: path.display().to_string(),
            expected: vec![expected * 4],
            found: vec![bytes.len()],
        });
    }
    bytes
        .chunks_exact(4)
        .map(|c| {
            let t = u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize;
            if t >= vocab {
                Err(Error::TokenOutOfRange { token: t, vocab })
            } else {
                Ok(t)
            }
        })
        .collect()
}

pub fn write_corpora(dir: &Path, corpora: &[ClientCorpus], config: &CorpusConfig, seed: u64) -> Result<CorpusHeader> {
    fs::create_dir_all(dir)?;
    let header = CorpusHeader {
        vocab_size: config.vocab_size,
        seed,
        spec_hash: config.content_hash(),
        mode: config.mode,
        lengths: corpora.iter().map(|c| [c.train.len(), c.valid.len(), c.test.len()]).collect(),
    };
    for (i, c) in corpora.iter().enumerate() {
        write_tokens(&stream_path(dir, i, "train"), &c.train)?;
        write_tokens(&stream_path(dir, i, "valid"), &c.valid)?;
        write_tokens(&stream_path(dir, i, "test"), &c.test)?;
    }
    fs::write(dir.join(HEADER), serde_json::to_string_pretty(&header)?)?;
    Ok(header)
}

pub fn read_corpora(dir: &Path) -> Result<(CorpusHeader, Vec<ClientCorpus>)> {
    let header: CorpusHeader = serde_json::from_str(&fs::read_to_string(dir.join(HEADER))?)?;
    let v = header.vocab_size;
    let corpora = header
        .lengths
        .iter()
        .enumerate()
        .map(|(i, [tr, va, te])| {
            Ok(ClientCorpus {
                train: read_tokens(&stream_path(dir, i, "train"), *tr, v)?,
                valid: read_tokens(&stream_path(dir, i, "valid"), *va, v)?,
                test: read_tokens(&stream_path(dir, i, "test"), *te, v)?,
                mode: header.mode,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, corpora))
}
