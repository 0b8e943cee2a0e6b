//! Query-relevance scoring backends and the top-k selection baseline.
//!
//! Scores are opaque ordinals: only their ordering (and engine tie-breaks
//! by chunk id) ever matters downstream, so backends are free to return
//! logits, probabilities, or overlap ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use crate::chunk::{Chunk, Query, ScoredChunk};
use crate::embed::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::text::normalized_words;

pub trait Scorer: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Raw backend scoring. Callers go through the free functions
    /// [`score`]/[`score_batch`], which handle the empty-text guard.
    fn score(&self, chunk: &Chunk, query: &Query) -> Result<f64>;

    /// Batch scoring; the default is elementwise. Remote backends override
    /// this with a single request.
    fn score_batch(&self, chunks: &[&Chunk], query: &Query) -> Result<Vec<f64>> {
        chunks.iter().map(|c| self.score(c, query)).collect()
    }

    /// Whether concurrent calls are safe. Deterministic backends are
    /// stateless; backends that return false are called serially.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Scores one chunk. Empty chunk text scores 0 with a warning instead of
/// reaching the backend.
pub fn score(backend: &dyn Scorer, chunk: &Chunk, query: &Query) -> Result<f64> {
    if query.text.trim().is_empty() {
        return Err(Error::EmptyQuery);
    }
    if chunk.text.trim().is_empty() {
        log::warn!("chunk {} has empty text; scoring it 0", chunk.id);
        return Ok(0.0);
    }
    let value = backend.score(chunk, query)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteScore(value));
    }
    Ok(value)
}

/// Scores a batch, preserving input order. The first backend error aborts
/// the whole batch; partial results are never returned.
pub fn score_batch(
    backend: &dyn Scorer,
    chunks: &[Chunk],
    query: &Query,
) -> Result<Vec<ScoredChunk>> {
    if query.text.trim().is_empty() {
        return Err(Error::EmptyQuery);
    }
    let mut values = vec![0.0f64; chunks.len()];
    let mut nonempty = Vec::new();
    for (i, chunk) in chunks.iter().enumerate() {
        if chunk.text.trim().is_empty() {
            log::warn!("chunk {} has empty text; scoring it 0", chunk.id);
        } else {
            nonempty.push(i);
        }
    }
    if !nonempty.is_empty() {
        let subset: Vec<&Chunk> = nonempty.iter().map(|&i| &chunks[i]).collect();
        let scored = backend.score_batch(&subset, query)?;
        if scored.len() != subset.len() {
            return Err(Error::Backend(format!(
                "{} scorer returned {} scores for {} chunks",
                backend.kind(),
                scored.len(),
                subset.len()
            )));
        }
        for (&i, value) in nonempty.iter().zip(&scored) {
            if !value.is_finite() {
                return Err(Error::NonFiniteScore(*value));
            }
            values[i] = *value;
        }
    }
    Ok(chunks
        .iter()
        .zip(values)
        .map(|(chunk, score)| ScoredChunk::new(chunk.clone(), score))
        .collect())
}

/// The k highest-scoring chunks, descending by score, ties broken by lower
/// chunk id. All chunks when k ≥ n.
pub fn select_topk(scored: &[ScoredChunk], k: usize) -> Vec<ScoredChunk> {
    let mut sorted: Vec<ScoredChunk> = scored.to_vec();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.id().cmp(&b.id()))
    });
    sorted.truncate(k);
    sorted
}

/// Fraction of distinct normalized query tokens present in the chunk.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlap;

impl Scorer for LexicalOverlap {
    fn kind(&self) -> &'static str {
        "lexical-overlap"
    }

    fn score(&self, chunk: &Chunk, query: &Query) -> Result<f64> {
        let query_tokens: BTreeSet<String> = normalized_words(&query.text).into_iter().collect();
        if query_tokens.is_empty() {
            log::warn!("query normalizes to no tokens; lexical overlap is 0");
            return Ok(0.0);
        }
        let chunk_tokens: BTreeSet<String> = normalized_words(&chunk.text).into_iter().collect();
        let hits = query_tokens.intersection(&chunk_tokens).count();
        Ok(hits as f64 / query_tokens.len() as f64)
    }
}

#[derive(Debug, Deserialize)]
struct TableScores {
    #[serde(default)]
    default: f64,
    scores: BTreeMap<String, f64>,
}

/// Fixed score table keyed by chunk label (falling back to chunk text).
/// Chunks absent from the table get the configured default.
#[derive(Debug, Clone, Default)]
pub struct FixedTable {
    default: f64,
    scores: BTreeMap<String, f64>,
}

impl FixedTable {
    pub fn new(scores: BTreeMap<String, f64>, default: f64) -> Self {
        FixedTable { default, scores }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let table: TableScores = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (key, value) in &table.scores {
            if !value.is_finite() {
                return Err(Error::Config(format!(
                    "score table entry {key:?} is not finite"
                )));
            }
        }
        Ok(FixedTable {
            default: table.default,
            scores: table.scores,
        })
    }
}

impl Scorer for FixedTable {
    fn kind(&self) -> &'static str {
        "fixed-table"
    }

    fn score(&self, chunk: &Chunk, _query: &Query) -> Result<f64> {
        if let Some(label) = &chunk.label {
            if let Some(v) = self.scores.get(label) {
                return Ok(*v);
            }
        }
        Ok(*self.scores.get(&chunk.text).unwrap_or(&self.default))
    }
}

/// Cosine similarity between chunk and query embeddings.
pub struct EmbeddingCosine {
    embedder: Box<dyn Embedder>,
}

impl EmbeddingCosine {
    pub fn new(embedder: Box<dyn Embedder>) -> Self {
        EmbeddingCosine { embedder }
    }
}

impl Scorer for EmbeddingCosine {
    fn kind(&self) -> &'static str {
        "embedding-cosine"
    }

    fn score(&self, chunk: &Chunk, query: &Query) -> Result<f64> {
        let a = self.embedder.embed(&chunk.text)?;
        let b = self.embedder.embed(&query.text)?;
        if a.len() != b.len() {
            return Err(Error::Backend(format!(
                "embedding dimensions differ: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        Ok(cosine(&a, &b))
    }
}
