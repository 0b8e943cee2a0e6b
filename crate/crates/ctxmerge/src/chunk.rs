//! Core domain types: chunks, queries, budgets, and the token accounting
//! they share.
//!
//! A [`Chunk`] is either an original retrieved unit or the result of fusing
//! two parents; provenance and depth are tracked so a whole merge run can be
//! audited afterwards. Identifiers are engine-assigned dense integers in
//! input order, which gives every tie-break in the crate a stable answer.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Engine-assigned chunk identifier. Original chunks are numbered in input
/// order; fused chunks continue the sequence.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ChunkId(pub u64);

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Hands out monotonically increasing chunk ids for one engine run.
#[derive(Debug, Clone, Default)]
pub struct IdGen {
    next: u64,
}

impl IdGen {
    pub fn new() -> Self {
        Self { next: 0 }
    }

    /// Start the sequence after the largest id already in use.
    pub fn after(ids: impl IntoIterator<Item = ChunkId>) -> Self {
        let next = ids.into_iter().map(|id| id.0 + 1).max().unwrap_or(0);
        Self { next }
    }

    pub fn next_id(&mut self) -> ChunkId {
        let id = ChunkId(self.next);
        self.next += 1;
        id
    }
}

/// Counts tokens of a text. The reference implementation is whitespace
/// splitting; live deployments may substitute endpoint-reported counts by
/// constructing chunks through [`Chunk::with_token_len`].
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Deterministic, model-free reference tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// An atomic or fused text unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ChunkId,
    pub text: String,
    /// Token count of `text` under the active tokenizer.
    pub token_len: usize,
    /// Original chunk ids this chunk derives from. `{id}` for originals.
    pub provenance: BTreeSet<ChunkId>,
    /// Number of fusion generations applied; 0 for originals.
    pub depth: usize,
    /// External identifier carried over from the input file, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Chunk {
    /// An original retrieved chunk: provenance is its own id, depth 0.
    pub fn original(id: ChunkId, text: impl Into<String>, tokenizer: &dyn Tokenizer) -> Self {
        let text = text.into();
        let token_len = tokenizer.count(&text);
        Chunk {
            id,
            token_len,
            provenance: BTreeSet::from([id]),
            depth: 0,
            label: None,
            text,
        }
    }

    /// An original chunk with an externally supplied token count (live mode,
    /// where the serving endpoint reports lengths under its own tokenizer).
    pub fn with_token_len(id: ChunkId, text: impl Into<String>, token_len: usize) -> Self {
        Chunk {
            id,
            token_len,
            provenance: BTreeSet::from([id]),
            depth: 0,
            label: None,
            text: text.into(),
        }
    }

    /// The result of fusing `a` and `b`: provenance is the union of the
    /// parents', depth is one past the deeper parent.
    pub fn fused(
        id: ChunkId,
        text: impl Into<String>,
        a: &Chunk,
        b: &Chunk,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let text = text.into();
        let token_len = tokenizer.count(&text);
        let provenance = a.provenance.union(&b.provenance).copied().collect();
        Chunk {
            id,
            token_len,
            provenance,
            depth: 1 + a.depth.max(b.depth),
            label: None,
            text,
        }
    }

    pub fn labeled(mut self, label: Option<String>) -> Self {
        self.label = label;
        self
    }
}

/// A chunk bound to a query-relevance score within a working set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub score: f64,
}

impl ScoredChunk {
    /// Panics on a non-finite score: backends are required to validate
    /// before constructing one.
    pub fn new(chunk: Chunk, score: f64) -> Self {
        assert!(score.is_finite(), "score must be finite, got {score}");
        ScoredChunk { chunk, score }
    }

    pub fn id(&self) -> ChunkId {
        self.chunk.id
    }
}

/// The user query chunks are scored and merged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl Query {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::EmptyQuery);
        }
        Ok(Query { text, id: None })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }
}

/// Token limit derived from a multiplier over the average chunk length of
/// the initial retrieved set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub limit_tokens: usize,
    pub multiplier: f64,
    pub avg_chunk_len: f64,
}

impl Budget {
    /// A budget pinned to an explicit token limit. `multiplier` is derived
    /// for reporting; prefer [`compute_budget`] for the standard convention.
    pub fn exact(limit_tokens: usize, avg_chunk_len: f64) -> Self {
        Budget {
            limit_tokens,
            multiplier: limit_tokens as f64 / avg_chunk_len,
            avg_chunk_len,
        }
    }
}

/// limit = floor(multiplier × mean token length) over the initial set.
pub fn compute_budget(chunks: &[Chunk], multiplier: f64) -> Result<Budget> {
    if chunks.is_empty() {
        return Err(Error::EmptyContextSet);
    }
    if !(multiplier > 0.0) {
        return Err(Error::InvalidMultiplier(multiplier));
    }
    let avg =
        chunks.iter().map(|c| c.token_len).sum::<usize>() as f64 / chunks.len() as f64;
    let limit = (multiplier * avg).floor() as usize;
    if limit == 0 {
        return Err(Error::ZeroBudget {
            multiplier,
            avg,
        });
    }
    Ok(Budget {
        limit_tokens: limit,
        multiplier,
        avg_chunk_len: avg,
    })
}

/// Sum of token lengths over a set of chunks.
pub fn total_length<'a>(chunks: impl IntoIterator<Item = &'a Chunk>) -> usize {
    chunks.into_iter().map(|c| c.token_len).sum()
}

/// Sum of token lengths over a scored working set.
pub fn total_length_scored(chunks: &[ScoredChunk]) -> usize {
    total_length(chunks.iter().map(|s| &s.chunk))
}

/// One line of the chunk input file: {"id"?, "text", "score"?}.
#[derive(Debug, Deserialize, Serialize)]
struct ChunkLine {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    score: Option<f64>,
}

/// Chunks read from a JSONL file, plus any scores the file carried.
#[derive(Debug)]
pub struct ChunkFile {
    pub chunks: Vec<Chunk>,
    pub provided_scores: Vec<Option<f64>>,
}

impl ChunkFile {
    pub fn all_scores_provided(&self) -> bool {
        !self.chunks.is_empty() && self.provided_scores.iter().all(|s| s.is_some())
    }

    pub fn any_score_provided(&self) -> bool {
        self.provided_scores.iter().any(|s| s.is_some())
    }
}

/// Reads the JSONL chunk schema, assigning engine ids in input order.
pub fn load_chunks_jsonl(path: &Path, tokenizer: &dyn Tokenizer) -> Result<ChunkFile> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut ids = IdGen::new();
    let mut chunks = Vec::new();
    let mut provided_scores = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ChunkLine = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.display().to_string(),
            line: i + 1,
            source: e,
        })?;
        if let Some(score) = parsed.score {
            if !score.is_finite() {
                return Err(Error::NonFiniteScore(score));
            }
        }
        chunks.push(Chunk::original(ids.next_id(), parsed.text, tokenizer).labeled(parsed.id));
        provided_scores.push(parsed.score);
    }
    Ok(ChunkFile {
        chunks,
        provided_scores,
    })
}

/// Writes a working set back out as JSONL, one chunk object per line.
pub fn write_context_jsonl<W: Write>(mut w: W, chunks: &[ScoredChunk]) -> Result<()> {
    for sc in chunks {
        let mut value = serde_json::to_value(&sc.chunk).expect("chunk serializes");
        value["score"] = serde_json::json!(sc.score);
        writeln!(w, "{value}").map_err(|e| Error::io("<context output>", e))?;
    }
    Ok(())
}
