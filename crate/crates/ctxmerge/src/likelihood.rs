//! Conditional negative log-likelihood: how cheaply a source chunk can be
//! described given an anchor chunk.
//!
//! The value computed here is `-(1/l) Σ log P(x_t｜anchor, x_<t)` over the
//! source's `l` tokens, in nats. A low value means the anchor already
//! carries most of the source's content, which makes it the right host to
//! absorb the source during asymmetric merging. Only the ordering of
//! values matters, so cheap deterministic estimators are enough offline.

use std::collections::BTreeMap;
use std::fmt;

use crate::chunk::{Chunk, ChunkId, ScoredChunk};
use crate::embed::{cosine, Embedder};
use crate::error::{Error, Result};

pub trait NllModel: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Log-probabilities of the source's tokens conditioned on the anchor
    /// text followed by the source prefix. Deterministic backends return
    /// exactly one value per source token under the active tokenizer.
    fn token_logprobs(&self, anchor: &str, source: &str) -> Result<Vec<f64>>;

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Negated mean of the per-token log-probabilities of `source` given
/// `anchor`. Errors if the backend returns fewer logprobs than the source
/// has tokens.
pub fn conditional_nll(backend: &dyn NllModel, source: &Chunk, anchor: &Chunk) -> Result<f64> {
    if source.text.trim().is_empty() {
        return Err(Error::EmptySourceChunk);
    }
    let logprobs = backend.token_logprobs(&anchor.text, &source.text)?;
    if logprobs.is_empty() || logprobs.len() < source.token_len {
        return Err(Error::LogprobAlignment(format!(
            "backend returned {} logprobs for a {}-token source",
            logprobs.len(),
            source.token_len
        )));
    }
    let sum: f64 = logprobs.iter().sum();
    Ok(-sum / logprobs.len() as f64)
}

/// The candidate whose conditioning lowers the source's NLL the most.
/// Values are collected for all candidates before the argmin, so the
/// result is independent of call completion order. Ties break toward the
/// lower chunk id.
pub fn best_anchor(
    backend: &dyn NllModel,
    source: &ScoredChunk,
    candidates: &[ScoredChunk],
) -> Result<ScoredChunk> {
    if candidates.is_empty() {
        return Err(Error::NoAnchor);
    }
    debug_assert!(
        candidates.iter().all(|c| c.id() != source.id()),
        "source must not be among the anchor candidates"
    );
    let mut values = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        values.push(conditional_nll(backend, &source.chunk, &candidate.chunk)?);
    }
    let mut best = 0usize;
    for i in 1..candidates.len() {
        let better = values[i] < values[best]
            || (values[i] == values[best] && candidates[i].id() < candidates[best].id());
        if better {
            best = i;
        }
    }
    Ok(candidates[best].clone())
}

/// ln(V) per token, independent of context. Useful as a mock where only
/// tie-break behaviour matters.
#[derive(Debug, Clone, Copy)]
pub struct UniformMock {
    pub vocab: usize,
}

impl NllModel for UniformMock {
    fn kind(&self) -> &'static str {
        "uniform-mock"
    }

    fn token_logprobs(&self, _anchor: &str, source: &str) -> Result<Vec<f64>> {
        let logprob = -(self.vocab as f64).ln();
        Ok(source.split_whitespace().map(|_| logprob).collect())
    }
}

/// Laplace-smoothed bigram model over whitespace tokens, trained on the
/// anchor text alone and evaluated on the source tokens. The vocabulary is
/// the union of anchor and source tokens plus an unknown symbol, so an
/// anchor that contains the source verbatim always scores lower than one
/// with disjoint vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct BigramOracle {
    pub smoothing: f64,
}

impl Default for BigramOracle {
    fn default() -> Self {
        BigramOracle { smoothing: 1.0 }
    }
}

impl NllModel for BigramOracle {
    fn kind(&self) -> &'static str {
        "bigram-oracle"
    }

    fn token_logprobs(&self, anchor: &str, source: &str) -> Result<Vec<f64>> {
        let anchor_tokens: Vec<&str> = anchor.split_whitespace().collect();
        let source_tokens: Vec<&str> = source.split_whitespace().collect();

        let mut vocab: std::collections::BTreeSet<&str> =
            anchor_tokens.iter().copied().collect();
        vocab.extend(source_tokens.iter().copied());
        // +1 for the unknown symbol
        let vocab_size = vocab.len() as f64 + 1.0;

        let mut bigram: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        let mut row_total: BTreeMap<&str, f64> = BTreeMap::new();
        for pair in anchor_tokens.windows(2) {
            *bigram.entry((pair[0], pair[1])).or_insert(0.0) += 1.0;
            *row_total.entry(pair[0]).or_insert(0.0) += 1.0;
        }

        let alpha = self.smoothing;
        let mut logprobs = Vec::with_capacity(source_tokens.len());
        // The conditioning context of the first source token is the tail of
        // the anchor, matching "anchor text followed by the source prefix".
        let mut prev = anchor_tokens.last().copied();
        for token in &source_tokens {
            let (count, total) = match prev {
                Some(p) => (
                    bigram.get(&(p, *token)).copied().unwrap_or(0.0),
                    row_total.get(p).copied().unwrap_or(0.0),
                ),
                None => (0.0, 0.0),
            };
            let prob = (count + alpha) / (total + alpha * vocab_size);
            logprobs.push(prob.ln());
            prev = Some(token);
        }
        Ok(logprobs)
    }
}

/// How a pairwise matrix measures chunk-to-chunk similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixMetric {
    Cosine,
    Nll,
}

impl fmt::Display for MatrixMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixMetric::Cosine => write!(f, "cosine"),
            MatrixMetric::Nll => write!(f, "nll"),
        }
    }
}

/// Pairwise chunk similarities, rows and columns ordered by descending
/// relevance score. The diagonal is a NaN sentinel. Cosine matrices are
/// symmetric; NLL matrices generally are not (cell (i,j) conditions chunk
/// i on chunk j).
#[derive(Debug, Clone)]
pub struct PairwiseMatrix {
    pub ids: Vec<ChunkId>,
    pub values: Vec<Vec<f64>>,
    pub metric: MatrixMetric,
}

impl PairwiseMatrix {
    /// CSV with the metric on a comment line, chunk ids as the header, and
    /// the sentinel diagonal written as an empty cell.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# metric: {}\n", self.metric);
        out.push_str("id");
        for id in &self.ids {
            out.push_str(&format!(",{id}"));
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(&id.to_string());
            for j in 0..self.ids.len() {
                if i == j {
                    out.push(',');
                } else {
                    out.push_str(&format!(",{:.6}", self.values[i][j]));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the n×n similarity matrix over a scored working set.
pub fn pairwise_matrix(
    chunks: &[ScoredChunk],
    metric: MatrixMetric,
    embedder: Option<&dyn Embedder>,
    nll: Option<&dyn NllModel>,
) -> Result<PairwiseMatrix> {
    if chunks.len() < 2 {
        return Err(Error::Backend(
            "pairwise matrix needs at least 2 chunks".into(),
        ));
    }
    let mut ordered: Vec<&ScoredChunk> = chunks.iter().collect();
    ordered.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.id().cmp(&b.id()))
    });
    let n = ordered.len();
    let ids: Vec<ChunkId> = ordered.iter().map(|c| c.id()).collect();
    let mut values = vec![vec![f64::NAN; n]; n];

    let mut fill = |rows_done: &mut usize| -> Result<()> {
        match metric {
            MatrixMetric::Cosine => {
                let embedder = embedder.ok_or_else(|| {
                    Error::Config("cosine matrix requires an embedding backend".into())
                })?;
                let mut vectors = Vec::with_capacity(n);
                for chunk in &ordered {
                    vectors.push(embedder.embed(&chunk.chunk.text)?);
                }
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            values[i][j] = cosine(&vectors[i], &vectors[j]);
                        }
                    }
                    *rows_done = i + 1;
                }
            }
            MatrixMetric::Nll => {
                let nll = nll.ok_or_else(|| {
                    Error::Config("nll matrix requires an NLL backend".into())
                })?;
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            values[i][j] =
                                conditional_nll(nll, &ordered[i].chunk, &ordered[j].chunk)?;
                        }
                    }
                    *rows_done = i + 1;
                }
            }
        }
        Ok(())
    };

    let mut rows_done = 0usize;
    if let Err(e) = fill(&mut rows_done) {
        return Err(Error::MatrixAborted {
            rows_completed: rows_done,
            source: Box::new(e),
        });
    }
    Ok(PairwiseMatrix {
        ids,
        values,
        metric,
    })
}
