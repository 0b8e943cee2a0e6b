//! Embedding backends used by the cosine scorer and the pairwise
//! similarity matrix. Offline work uses a deterministic hashed
//! bag-of-words projection; tests use fixed vector tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::text::normalized_words;

pub trait Embedder: Send + Sync {
    fn kind(&self) -> &'static str;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Stable FNV-1a; std's hasher is not guaranteed stable across releases.
fn fnv1a(token: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in token.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Hashed bag-of-words: token counts folded into a fixed dimension.
#[derive(Debug, Clone, Copy)]
pub struct BowEmbedder {
    pub dim: usize,
}

impl Default for BowEmbedder {
    fn default() -> Self {
        BowEmbedder { dim: 256 }
    }
}

impl Embedder for BowEmbedder {
    fn kind(&self) -> &'static str {
        "bow"
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for token in normalized_words(text) {
            let slot = (fnv1a(&token) % self.dim as u64) as usize;
            v[slot] += 1.0;
        }
        Ok(v)
    }
}

#[derive(Debug, Deserialize)]
struct TableFile {
    vectors: BTreeMap<String, Vec<f64>>,
}

/// Fixed text → vector table, for tests and frozen fixtures.
#[derive(Debug, Clone, Default)]
pub struct TableEmbedder {
    vectors: BTreeMap<String, Vec<f64>>,
}

impl TableEmbedder {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Self {
        TableEmbedder { vectors }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let table: TableFile = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(TableEmbedder {
            vectors: table.vectors,
        })
    }
}

impl Embedder for TableEmbedder {
    fn kind(&self) -> &'static str {
        "table"
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("embedding table has no entry for {text:?}")))
    }
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
