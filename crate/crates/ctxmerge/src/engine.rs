//! The merge engine: sequential symmetric/asymmetric loops, the
//! hierarchical parallel scheduler, and the latency/depth bound
//! calculators.
//!
//! All variants share one loop shape: while the working set is over budget
//! and still has more than `target_count` chunks, select, fuse, and update.
//! The hierarchical schedule plans ⌊n/2⌋ disjoint pairs per layer and fuses
//! them with at most `concurrency` calls in flight; the budget is
//! re-checked only between layers, so a layer may merge more than strictly
//! needed. Every run produces a [`MergeTrace`].

use std::fmt;
use std::str::FromStr;

use crate::chunk::{
    total_length_scored, Budget, Chunk, ChunkId, IdGen, Query, ScoredChunk, Tokenizer,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, Fuser};
use crate::likelihood::{best_anchor, NllModel};
use crate::scoring::{score, Scorer};
use crate::trace::{MergeTrace, Strategy, TraceNode};

/// Whether fusions run one-at-a-time or layer-by-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Sequential,
    Hierarchical,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Sequential => write!(f, "sequential"),
            Schedule::Hierarchical => write!(f, "hierarchical"),
        }
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sequential" | "seq" => Ok(Schedule::Sequential),
            "hierarchical" | "hier" => Ok(Schedule::Hierarchical),
            other => Err(format!(
                "unknown schedule {other:?} (expected sequential|hierarchical)"
            )),
        }
    }
}

/// Configuration of one merge run.
#[derive(Debug, Clone)]
pub struct MergeConfig {
    pub strategy: Strategy,
    pub schedule: Schedule,
    pub budget: Budget,
    /// Maximum concurrent fusion calls in a hierarchical layer; ignored by
    /// the sequential schedule.
    pub concurrency: usize,
    /// Rescore fused chunks with the run's scorer (default). When off, a
    /// fused chunk inherits the higher parent score.
    pub rescore_fused: bool,
    /// Stop once the working set is this small, budget met or not. 1 gives
    /// the classic run-to-singleton guard; benches set it higher.
    pub target_count: usize,
}

impl MergeConfig {
    pub fn new(strategy: Strategy, schedule: Schedule, budget: Budget) -> Self {
        MergeConfig {
            strategy,
            schedule,
            budget,
            concurrency: 8,
            rescore_fused: true,
            target_count: 1,
        }
    }

    pub fn with_concurrency(mut self, concurrency: usize) -> Self {
        assert!(concurrency >= 1, "concurrency limit must be at least 1");
        self.concurrency = concurrency;
        self
    }

    pub fn with_target_count(mut self, target: usize) -> Self {
        self.target_count = target.max(1);
        self
    }

    pub fn with_rescore(mut self, rescore: bool) -> Self {
        self.rescore_fused = rescore;
        self
    }
}

/// Backends a merge run needs.
pub struct Backends<'a> {
    pub scorer: &'a dyn Scorer,
    pub nll: &'a dyn NllModel,
    pub fuser: &'a dyn Fuser,
    pub tokenizer: &'a dyn Tokenizer,
}

/// One hierarchical layer: disjoint pairs to fuse plus the chunks that sit
/// the layer out. For asymmetric planning a pair is (source, anchor).
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub pairs: Vec<(ScoredChunk, ScoredChunk)>,
    pub leftovers: Vec<ScoredChunk>,
    pub layer: usize,
}

fn by_score_then_id(a: &ScoredChunk, b: &ScoredChunk) -> std::cmp::Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| a.id().cmp(&b.id()))
}

/// The two lowest-scoring chunks (the pair minimizing the score sum),
/// ties broken by lower id.
pub fn select_pair_symmetric(working: &[ScoredChunk]) -> Result<(ScoredChunk, ScoredChunk)> {
    if working.len() < 2 {
        return Err(Error::PairUnavailable);
    }
    let mut sorted: Vec<&ScoredChunk> = working.iter().collect();
    sorted.sort_by(|a, b| by_score_then_id(a, b));
    Ok((sorted[0].clone(), sorted[1].clone()))
}

/// The global minimum-score chunk as the source, and the candidate that
/// minimizes its conditional NLL as the anchor.
pub fn select_source_and_anchor(
    working: &[ScoredChunk],
    nll: &dyn NllModel,
) -> Result<(ScoredChunk, ScoredChunk)> {
    if working.len() < 2 {
        return Err(Error::PairUnavailable);
    }
    let source = working
        .iter()
        .min_by(|a, b| by_score_then_id(a, b))
        .expect("nonempty")
        .clone();
    let candidates: Vec<ScoredChunk> = working
        .iter()
        .filter(|c| c.id() != source.id())
        .cloned()
        .collect();
    let anchor = best_anchor(nll, &source, &candidates)?;
    Ok((source, anchor))
}

/// Sort ascending by score and pair neighbours bottom-up; an odd pool
/// leaves the single highest-scoring chunk unpaired.
pub fn plan_symmetric_layer(working: Vec<ScoredChunk>, layer: usize) -> LayerPlan {
    let mut sorted = working;
    sorted.sort_by(by_score_then_id);
    let mut pairs = Vec::with_capacity(sorted.len() / 2);
    let mut leftovers = Vec::new();
    let mut iter = sorted.into_iter();
    while let Some(first) = iter.next() {
        match iter.next() {
            Some(second) => pairs.push((first, second)),
            None => leftovers.push(first),
        }
    }
    LayerPlan {
        pairs,
        leftovers,
        layer,
    }
}

/// Greedy matching pass: ⌊n/2⌋ times, take the lowest-scoring available
/// chunk as the source, its minimum-NLL available partner as the anchor,
/// and remove both from the pool. Pairs are (source, anchor).
pub fn plan_asymmetric_layer(
    working: Vec<ScoredChunk>,
    nll: &dyn NllModel,
    layer: usize,
) -> Result<LayerPlan> {
    let rounds = working.len() / 2;
    let mut pool = working;
    let mut pairs = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let source_idx = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| by_score_then_id(a, b))
            .map(|(i, _)| i)
            .expect("pool has at least 2 chunks");
        let source = pool.remove(source_idx);
        let anchor = best_anchor(nll, &source, &pool)?;
        pool.retain(|c| c.id() != anchor.id());
        pairs.push((source, anchor));
    }
    Ok(LayerPlan {
        pairs,
        leftovers: pool,
        layer,
    })
}

/// Plans one layer under the configured strategy. Fewer than two chunks
/// give an empty plan.
pub fn plan_layer(
    strategy: Strategy,
    working: Vec<ScoredChunk>,
    nll: &dyn NllModel,
    layer: usize,
) -> Result<LayerPlan> {
    if working.len() < 2 {
        return Ok(LayerPlan {
            pairs: Vec::new(),
            leftovers: working,
            layer,
        });
    }
    match strategy {
        Strategy::Symmetric => Ok(plan_symmetric_layer(working, layer)),
        Strategy::Asymmetric => plan_asymmetric_layer(working, nll, layer),
    }
}

/// Runs `f` over `items` with at most `limit` threads in flight, in serial
/// batches of `limit`. Results are attached by item index, never by
/// completion order.
pub(crate) fn map_batched<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<Result<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let limit = limit.max(1);
    let f = &f;
    let mut out = Vec::with_capacity(items.len());
    for (batch_index, batch) in items.chunks(limit).enumerate() {
        let base = batch_index * limit;
        let mut results: Vec<Option<Result<R>>> = (0..batch.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .enumerate()
                .map(|(i, item)| scope.spawn(move || (i, f(base + i, item))))
                .collect();
            for handle in handles {
                if let Ok((i, result)) = handle.join() {
                    results[i] = Some(result);
                }
            }
        });
        for result in results {
            out.push(
                result.unwrap_or_else(|| Err(Error::Backend("worker thread panicked".into()))),
            );
        }
    }
    out
}

fn fused_score(
    config: &MergeConfig,
    backends: &Backends<'_>,
    query: &Query,
    chunk: &Chunk,
    carried: f64,
) -> Result<f64> {
    if config.rescore_fused {
        score(backends.scorer, chunk, query)
    } else {
        Ok(carried)
    }
}

fn abort(error: Error, mut trace: MergeTrace, working: &[ScoredChunk]) -> Error {
    trace.set_finals(working);
    Error::RunAborted {
        source: Box::new(error),
        trace: Box::new(trace),
    }
}

fn should_continue(working: &[ScoredChunk], config: &MergeConfig) -> bool {
    total_length_scored(working) > config.budget.limit_tokens
        && working.len() > config.target_count.max(1)
}

/// One fusion per iteration until the budget is met or the set cannot
/// shrink further.
pub fn merge_sequential(
    working: Vec<ScoredChunk>,
    query: &Query,
    config: &MergeConfig,
    backends: &Backends<'_>,
) -> Result<(Vec<ScoredChunk>, MergeTrace)> {
    if working.is_empty() {
        return Err(Error::EmptyContextSet);
    }
    let mut working = working;
    let mut trace = MergeTrace::new(&working);
    let mut ids = IdGen::after(working.iter().map(|c| c.id()));
    let mut iteration = 0usize;

    while should_continue(&working, config) {
        let step = (|| -> Result<(ScoredChunk, TraceNode)> {
            let (first, second, anchor) = match config.strategy {
                Strategy::Symmetric => {
                    let (low, next) = select_pair_symmetric(&working)?;
                    (low, next, None)
                }
                Strategy::Asymmetric => {
                    let (source, anchor) = select_source_and_anchor(&working, backends.nll)?;
                    let anchor_id = anchor.id();
                    (source, anchor, Some(anchor_id))
                }
            };
            // asymmetric fusion is host-first: the anchor is chunk A
            let (a, b) = match config.strategy {
                Strategy::Symmetric => (&first, &second),
                Strategy::Asymmetric => (&second, &first),
            };
            let (chunk, warnings) = fuse(
                backends.fuser,
                &a.chunk,
                &b.chunk,
                query,
                config.strategy,
                ids.next_id(),
                backends.tokenizer,
            )?;
            let carried = first.score.max(second.score);
            let value = fused_score(config, backends, query, &chunk, carried)?;
            let node = TraceNode {
                result: chunk.id,
                left: first.id(),
                right: second.id(),
                layer: iteration,
                strategy: config.strategy,
                anchor,
                warnings,
            };
            Ok((ScoredChunk::new(chunk, value), node))
        })();

        let (fused_chunk, node) = match step {
            Ok(v) => v,
            Err(e) => return Err(abort(e, trace, &working)),
        };
        working.retain(|c| c.id() != node.left && c.id() != node.right);
        trace.record(node, &fused_chunk.chunk, fused_chunk.score);
        working.push(fused_chunk);
        iteration += 1;
    }

    trace.set_finals(&working);
    Ok((working, trace))
}

/// Layer-by-layer merging: plan all disjoint pairs, fuse them with at most
/// `concurrency` calls in flight, rescore, and re-check the budget between
/// layers.
pub fn merge_hierarchical(
    working: Vec<ScoredChunk>,
    query: &Query,
    config: &MergeConfig,
    backends: &Backends<'_>,
) -> Result<(Vec<ScoredChunk>, MergeTrace)> {
    if working.is_empty() {
        return Err(Error::EmptyContextSet);
    }
    let mut working = working;
    let mut trace = MergeTrace::new(&working);
    let mut ids = IdGen::after(working.iter().map(|c| c.id()));
    let mut layer = 0usize;
    let limit = config
        .concurrency
        .min(backends.fuser.max_in_flight().unwrap_or(usize::MAX))
        .max(1);

    while should_continue(&working, config) {
        let current = std::mem::take(&mut working);
        let snapshot = current.clone();
        let plan = match plan_layer(config.strategy, current, backends.nll, layer) {
            Ok(plan) => plan,
            Err(e) => return Err(abort(e, trace, &snapshot)),
        };
        if plan.pairs.is_empty() {
            working = plan.leftovers;
            break;
        }

        // ids are allocated before the parallel section so results are
        // deterministic regardless of completion order
        let pair_ids: Vec<ChunkId> = plan.pairs.iter().map(|_| ids.next_id()).collect();
        let results = map_batched(&plan.pairs, limit, |i, (first, second)| {
            let (a, b) = match config.strategy {
                Strategy::Symmetric => (first, second),
                Strategy::Asymmetric => (second, first),
            };
            fuse(
                backends.fuser,
                &a.chunk,
                &b.chunk,
                query,
                config.strategy,
                pair_ids[i],
                backends.tokenizer,
            )
        });

        let mut fused_chunks = Vec::with_capacity(results.len());
        let mut failure: Option<Error> = None;
        for (i, result) in results.into_iter().enumerate() {
            match result {
                Ok((chunk, warnings)) => fused_chunks.push((i, chunk, warnings)),
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }

        // completed pairs enter the trace even when the layer aborts
        let mut next = plan.leftovers;
        for (i, chunk, warnings) in &fused_chunks {
            let (first, second) = &plan.pairs[*i];
            let anchor = match config.strategy {
                Strategy::Symmetric => None,
                Strategy::Asymmetric => Some(second.id()),
            };
            trace.record(
                TraceNode {
                    result: chunk.id,
                    left: first.id(),
                    right: second.id(),
                    layer,
                    strategy: config.strategy,
                    anchor,
                    warnings: warnings.clone(),
                },
                chunk,
                first.score.max(second.score),
            );
        }
        if let Some(e) = failure {
            return Err(abort(e, trace, &next));
        }
        for (i, chunk, _) in fused_chunks {
            let (first, second) = &plan.pairs[i];
            let carried = first.score.max(second.score);
            let value = match fused_score(config, backends, query, &chunk, carried) {
                Ok(v) => v,
                Err(e) => return Err(abort(e, trace, &next)),
            };
            trace.note_chunk(&chunk, value);
            next.push(ScoredChunk::new(chunk, value));
        }
        working = next;
        layer += 1;
    }

    trace.set_finals(&working);
    Ok((working, trace))
}

/// Dispatches on the configured schedule.
pub fn merge(
    working: Vec<ScoredChunk>,
    query: &Query,
    config: &MergeConfig,
    backends: &Backends<'_>,
) -> Result<(Vec<ScoredChunk>, MergeTrace)> {
    match config.schedule {
        Schedule::Sequential => merge_sequential(working, query, config, backends),
        Schedule::Hierarchical => merge_hierarchical(working, query, config, backends),
    }
}

/// Batch rounds a trace costs under concurrency limit `b`: the sum over
/// layers of ⌈pairs/b⌉. Sequential traces put one pair in each layer.
pub fn batch_rounds(trace: &MergeTrace, b: usize) -> usize {
    let b = b.max(1);
    trace
        .pairs_per_layer()
        .iter()
        .map(|pairs| pairs.div_ceil(b))
        .sum()
}

/// The layer-by-layer upper bound on sequential inference rounds for
/// reducing `n` chunks toward `m` under concurrency `b`, plus its closed
/// form ⌈n/b + log₂(n/m)⌉. Term k charges ⌈(n/2ᵏ)/b⌉ rounds (at least 1)
/// for the layer whose pool holds n/2ᵏ chunks, while n/2ᵏ > m.
pub fn rounds_upper_bound(n: usize, m: usize, b: usize) -> Result<(usize, usize)> {
    assert!(n >= 1 && m >= 1 && b >= 1, "n, m, b must be positive");
    if m > n {
        return Err(Error::TargetExceedsInitial {
            target: m,
            initial: n,
        });
    }
    let (n_f, m_f, b_f) = (n as f64, m as f64, b as f64);
    let mut summation = 0usize;
    let mut pool = n_f;
    while pool > m_f {
        summation += ((pool / b_f).ceil() as usize).max(1);
        pool /= 2.0;
    }
    let cap = (n_f / b_f + (n_f / m_f).log2()).ceil() as usize;
    Ok((summation, cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::WhitespaceTokenizer;
    use crate::fusion::{ExtractiveFuser, FusedText};
    use crate::likelihood::{BigramOracle, UniformMock};
    use crate::scoring::LexicalOverlap;
    use crate::trace::trace_max_depth;
    use std::collections::BTreeMap;

    const T: WhitespaceTokenizer = WhitespaceTokenizer;

    fn scored(id: u64, text: &str, score: f64) -> ScoredChunk {
        ScoredChunk::new(Chunk::original(ChunkId(id), text, &T), score)
    }

    fn backends<'a>(nll: &'a dyn NllModel, fuser: &'a dyn Fuser) -> Backends<'a> {
        Backends {
            scorer: &LexicalOverlap,
            nll,
            fuser,
            tokenizer: &T,
        }
    }

    fn ids(chunks: &[ScoredChunk]) -> Vec<u64> {
        chunks.iter().map(|c| c.id().0).collect()
    }

    #[test]
    fn symmetric_pair_takes_two_minima() {
        let working = vec![
            scored(0, "a", 0.9),
            scored(1, "b", 0.5),
            scored(2, "c", 0.2),
            scored(3, "d", 0.1),
        ];
        let (x, y) = select_pair_symmetric(&working).unwrap();
        assert_eq!((x.id().0, y.id().0), (3, 2));
    }

    #[test]
    fn symmetric_pair_breaks_ties_by_id() {
        let working = vec![scored(1, "a", 0.3), scored(2, "b", 0.3), scored(3, "c", 0.9)];
        let (x, y) = select_pair_symmetric(&working).unwrap();
        assert_eq!((x.id().0, y.id().0), (1, 2));
    }

    #[test]
    fn symmetric_pair_needs_two_chunks() {
        assert!(matches!(
            select_pair_symmetric(&[scored(0, "a", 0.5)]),
            Err(Error::PairUnavailable)
        ));
    }

    #[test]
    fn symmetric_pair_matches_exhaustive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(2..=8);
            let working: Vec<ScoredChunk> = (0..n)
                .map(|i| scored(i as u64, "t", (rng.gen_range(0..5) as f64) / 4.0))
                .collect();
            let mut best: Option<(f64, u64, u64)> = None;
            for i in 0..working.len() {
                for j in (i + 1)..working.len() {
                    let sum = working[i].score + working[j].score;
                    let lo = working[i].id().0.min(working[j].id().0);
                    let hi = working[i].id().0.max(working[j].id().0);
                    if best.map_or(true, |b| (sum, lo, hi) < b) {
                        best = Some((sum, lo, hi));
                    }
                }
            }
            let (x, y) = select_pair_symmetric(&working).unwrap();
            // same pair, returned lowest-score-first
            let expected = best.unwrap();
            let mut got = [x.id().0, y.id().0];
            got.sort_unstable();
            assert_eq!(got, [expected.1, expected.2]);
            assert!(
                (x.score, x.id()) <= (y.score, y.id()),
                "pair must be ordered by (score, id)"
            );
        }
    }

    #[test]
    fn source_and_anchor_forced_pair() {
        let working = vec![scored(0, "a b", 0.9), scored(1, "c d", 0.1)];
        let nll = UniformMock { vocab: 8 };
        let (source, anchor) = select_source_and_anchor(&working, &nll).unwrap();
        assert_eq!(source.id(), ChunkId(1));
        assert_eq!(anchor.id(), ChunkId(0));
    }

    #[test]
    fn uniform_nll_anchor_is_lowest_id() {
        let working = vec![
            scored(3, "a", 0.5),
            scored(1, "b", 0.6),
            scored(2, "c", 0.1),
            scored(7, "d", 0.9),
        ];
        let nll = UniformMock { vocab: 8 };
        let (source, anchor) = select_source_and_anchor(&working, &nll).unwrap();
        assert_eq!(source.id(), ChunkId(2));
        assert_eq!(anchor.id(), ChunkId(1));
    }

    #[test]
    fn bigram_anchor_prefers_verbatim_container() {
        let working = vec![
            scored(0, "the canal opened in 1869", 0.1),
            scored(1, "shipping routes shortened dramatically", 0.5),
            scored(2, "records say the canal opened in 1869 after a decade of work", 0.6),
            scored(3, "desert temperatures vary widely", 0.7),
            scored(4, "trade volumes grew steadily", 0.8),
        ];
        let nll = BigramOracle::default();
        let (source, anchor) = select_source_and_anchor(&working, &nll).unwrap();
        assert_eq!(source.id(), ChunkId(0));
        assert_eq!(anchor.id(), ChunkId(2));
    }

    #[test]
    fn sequential_within_budget_is_untouched() {
        let working = vec![scored(0, "alpha beta", 0.9), scored(1, "gamma delta", 0.1)];
        let budget = Budget::exact(100, 2.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Sequential, budget);
        let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
        let query = Query::new("alpha").unwrap();
        let (out, trace) = merge_sequential(working.clone(), &query, &config, &b).unwrap();
        assert_eq!(ids(&out), ids(&working));
        assert!(trace.nodes.is_empty());
        trace.verify().unwrap();
    }

    #[test]
    fn sequential_single_merge_traced_by_hand() {
        let working = vec![
            scored(0, "query words fill this chunk entirely.", 0.9),
            scored(1, "query words fill this other chunk.", 0.4),
            scored(2, "query words fit here.", 0.3),
        ];
        // 16 tokens total; one merge of the 0.4/0.3 pair, then the size
        // guard (target 2) stops the loop
        let budget = Budget::exact(10, 16.0 / 3.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Sequential, budget)
            .with_target_count(2);
        let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
        let query = Query::new("query words").unwrap();
        let (out, trace) = merge_sequential(working, &query, &config, &b).unwrap();
        assert_eq!(trace.nodes.len(), 1);
        let node = &trace.nodes[0];
        assert_eq!((node.left, node.right), (ChunkId(2), ChunkId(1)));
        assert_eq!(node.layer, 0);
        assert_eq!(ids(&out), vec![0, 3]);
        trace.verify().unwrap();
    }

    #[test]
    fn sequential_keeps_single_oversize_chunk() {
        let working = vec![scored(0, "far too many tokens for this budget", 0.5)];
        let budget = Budget::exact(2, 7.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Sequential, budget);
        let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
        let query = Query::new("tokens").unwrap();
        let (out, trace) = merge_sequential(working, &query, &config, &b).unwrap();
        assert_eq!(out.len(), 1);
        assert!(trace.nodes.is_empty());
    }

    #[test]
    fn sequential_abort_attaches_partial_trace() {
        struct FailSecond(std::sync::atomic::AtomicUsize);
        impl Fuser for FailSecond {
            fn kind(&self) -> &'static str {
                "fail-second"
            }
            fn fuse_text(
                &self,
                a: &Chunk,
                b: &Chunk,
                query: &Query,
                mode: Strategy,
            ) -> crate::error::Result<FusedText> {
                let call = self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if call >= 1 {
                    Err(Error::Backend("down".into()))
                } else {
                    ExtractiveFuser.fuse_text(a, b, query, mode)
                }
            }
        }
        let working = vec![
            scored(0, "alpha alpha alpha alpha.", 0.9),
            scored(1, "alpha beta beta beta.", 0.4),
            scored(2, "alpha gamma gamma gamma.", 0.3),
        ];
        let budget = Budget::exact(1, 4.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Sequential, budget);
        let fuser = FailSecond(std::sync::atomic::AtomicUsize::new(0));
        let b = backends(&UniformMock { vocab: 4 }, &fuser);
        let query = Query::new("alpha").unwrap();
        let err = merge_sequential(working, &query, &config, &b).unwrap_err();
        let trace = err.partial_trace().expect("partial trace");
        assert_eq!(trace.nodes.len(), 1);
    }

    #[test]
    fn symmetric_layer_pairs_bottom_up() {
        let working = vec![
            scored(0, "a", 0.9),
            scored(1, "b", 0.7),
            scored(2, "c", 0.5),
            scored(3, "d", 0.3),
        ];
        let plan = plan_symmetric_layer(working, 0);
        let pair_ids: Vec<(u64, u64)> = plan
            .pairs
            .iter()
            .map(|(x, y)| (x.id().0, y.id().0))
            .collect();
        assert_eq!(pair_ids, vec![(3, 2), (1, 0)]);
        assert!(plan.leftovers.is_empty());
    }

    #[test]
    fn symmetric_layer_leaves_top_chunk_when_odd() {
        let working: Vec<ScoredChunk> =
            (0..5).map(|i| scored(i, "t", i as f64 / 10.0)).collect();
        let plan = plan_symmetric_layer(working, 0);
        assert_eq!(plan.pairs.len(), 2);
        assert_eq!(plan.leftovers.len(), 1);
        assert_eq!(plan.leftovers[0].id(), ChunkId(4));
    }

    #[test]
    fn symmetric_layer_of_two_is_one_pair() {
        let plan = plan_symmetric_layer(vec![scored(0, "a", 0.2), scored(1, "b", 0.8)], 0);
        assert_eq!(plan.pairs.len(), 1);
        assert!(plan.leftovers.is_empty());
    }

    #[test]
    fn planning_under_two_chunks_is_empty() {
        let plan = plan_layer(
            Strategy::Symmetric,
            vec![scored(0, "a", 0.2)],
            &UniformMock { vocab: 4 },
            0,
        )
        .unwrap();
        assert!(plan.pairs.is_empty());
        assert_eq!(plan.leftovers.len(), 1);
    }

    #[test]
    fn asymmetric_layer_two_chunks_forced() {
        let working = vec![scored(0, "a b", 0.9), scored(1, "c d", 0.1)];
        let plan = plan_asymmetric_layer(working, &UniformMock { vocab: 4 }, 0).unwrap();
        assert_eq!(plan.pairs.len(), 1);
        assert_eq!(plan.pairs[0].0.id(), ChunkId(1)); // source
        assert_eq!(plan.pairs[0].1.id(), ChunkId(0)); // anchor
    }

    #[test]
    fn asymmetric_layer_under_uniform_mock_by_hand() {
        // sources are the two lowest scores; anchors are the lowest-id
        // chunk still available at each step
        let working = vec![
            scored(0, "a", 0.8),
            scored(1, "b", 0.6),
            scored(2, "c", 0.2),
            scored(3, "d", 0.4),
        ];
        let plan = plan_asymmetric_layer(working, &UniformMock { vocab: 4 }, 0).unwrap();
        let pair_ids: Vec<(u64, u64)> = plan
            .pairs
            .iter()
            .map(|(s, a)| (s.id().0, a.id().0))
            .collect();
        assert_eq!(pair_ids, vec![(2, 0), (3, 1)]);
        assert!(plan.leftovers.is_empty());
    }

    /// NLL backend driven by an explicit (source, anchor) value table.
    pub(crate) struct TableNll {
        pub table: BTreeMap<(u64, u64), f64>,
        pub texts: BTreeMap<String, u64>,
    }

    impl TableNll {
        pub fn new(entries: &[((u64, u64), f64)], texts: &[(&str, u64)]) -> Self {
            TableNll {
                table: entries.iter().copied().collect(),
                texts: texts.iter().map(|(t, i)| (t.to_string(), *i)).collect(),
            }
        }
    }

    impl NllModel for TableNll {
        fn kind(&self) -> &'static str {
            "table"
        }
        fn token_logprobs(&self, anchor: &str, source: &str) -> crate::error::Result<Vec<f64>> {
            let src = self.texts[source];
            let anc = self.texts[anchor];
            let value = self.table[&(src, anc)];
            Ok(source.split_whitespace().map(|_| -value).collect())
        }
    }

    #[test]
    fn asymmetric_layer_matches_select_and_remove_simulation() {
        let texts = [("w", 0), ("x", 1), ("y", 2), ("z", 3)];
        // crafted so the greedy pass must cross score neighbours
        let table = [
            ((0u64, 1u64), 5.0),
            ((0, 2), 1.0),
            ((0, 3), 4.0),
            ((1, 0), 2.0),
            ((1, 2), 3.0),
            ((1, 3), 0.5),
            ((2, 0), 9.0),
            ((2, 1), 9.0),
            ((2, 3), 9.0),
            ((3, 0), 9.0),
            ((3, 1), 9.0),
            ((3, 2), 9.0),
        ];
        let nll = TableNll::new(&table, &texts);
        let working = vec![
            scored(0, "w", 0.1),
            scored(1, "x", 0.2),
            scored(2, "y", 0.8),
            scored(3, "z", 0.9),
        ];

        // reference simulation of the select-and-remove loop
        let mut pool = working.clone();
        let mut expected = Vec::new();
        for _ in 0..(pool.len() / 2) {
            pool.sort_by(by_score_then_id);
            let source = pool.remove(0);
            let mut best: Option<(f64, u64)> = None;
            for cand in &pool {
                let v = nll.table[&(source.id().0, cand.id().0)];
                let key = (v, cand.id().0);
                if best.map_or(true, |b| key < b) {
                    best = Some(key);
                }
            }
            let anchor_id = best.unwrap().1;
            pool.retain(|c| c.id().0 != anchor_id);
            expected.push((source.id().0, anchor_id));
        }

        let plan = plan_asymmetric_layer(working, &nll, 0).unwrap();
        let got: Vec<(u64, u64)> = plan
            .pairs
            .iter()
            .map(|(s, a)| (s.id().0, a.id().0))
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![(0, 2), (1, 3)]);
    }

    fn sized_working(n: usize) -> Vec<ScoredChunk> {
        (0..n)
            .map(|i| {
                scored(
                    i as u64,
                    &format!("topic fact number {i} with filler words here."),
                    i as f64 / n as f64,
                )
            })
            .collect()
    }

    #[test]
    fn hierarchical_sixteen_to_two_takes_three_layers() {
        let working = sized_working(16);
        let budget = Budget::exact(1, 8.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Hierarchical, budget)
            .with_target_count(2)
            .with_concurrency(8);
        let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
        let query = Query::new("topic fact").unwrap();
        let (out, trace) = merge_hierarchical(working, &query, &config, &b).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(trace.pairs_per_layer(), vec![8, 4, 2]);
        assert_eq!(batch_rounds(&trace, 8), 3);
        trace.verify().unwrap();
    }

    #[test]
    fn hierarchical_single_chunk_has_no_layers() {
        let working = sized_working(1);
        let budget = Budget::exact(1, 8.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Hierarchical, budget);
        let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
        let query = Query::new("topic").unwrap();
        let (out, trace) = merge_hierarchical(working, &query, &config, &b).unwrap();
        assert_eq!(out.len(), 1);
        assert!(trace.nodes.is_empty());
    }

    #[test]
    fn hierarchical_five_chunks_first_layer_gives_three() {
        let working = sized_working(5);
        let budget = Budget::exact(1, 8.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Hierarchical, budget)
            .with_target_count(3);
        let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
        let query = Query::new("topic fact").unwrap();
        let (out, trace) = merge_hierarchical(working, &query, &config, &b).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(trace.pairs_per_layer(), vec![2]);
    }

    #[test]
    fn hierarchical_abort_keeps_completed_pairs() {
        struct FailOnId(u64);
        impl Fuser for FailOnId {
            fn kind(&self) -> &'static str {
                "fail-on-id"
            }
            fn fuse_text(
                &self,
                a: &Chunk,
                b: &Chunk,
                query: &Query,
                mode: Strategy,
            ) -> crate::error::Result<FusedText> {
                if a.id.0 == self.0 || b.id.0 == self.0 {
                    Err(Error::Backend("down".into()))
                } else {
                    ExtractiveFuser.fuse_text(a, b, query, mode)
                }
            }
        }
        let working = sized_working(4);
        let budget = Budget::exact(1, 8.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Hierarchical, budget);
        let fuser = FailOnId(3);
        let b = backends(&UniformMock { vocab: 4 }, &fuser);
        let query = Query::new("topic fact").unwrap();
        let err = merge_hierarchical(working, &query, &config, &b).unwrap_err();
        let trace = err.partial_trace().expect("partial trace");
        assert_eq!(trace.nodes.len(), 1, "one pair of the layer completed");
    }

    #[test]
    fn hierarchical_runs_are_deterministic() {
        let run = || {
            let working = sized_working(13);
            let budget = Budget::exact(1, 8.0);
            let config = MergeConfig::new(Strategy::Symmetric, Schedule::Hierarchical, budget)
                .with_concurrency(4);
            let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
            let query = Query::new("topic fact").unwrap();
            let (out, trace) = merge_hierarchical(working, &query, &config, &b).unwrap();
            (
                out.iter()
                    .map(|c| (c.id().0, c.chunk.text.clone()))
                    .collect::<Vec<_>>(),
                trace,
            )
        };
        let (out1, trace1) = run();
        let (out2, trace2) = run();
        assert_eq!(out1, out2);
        assert_eq!(trace1, trace2);
    }

    #[test]
    fn rounds_upper_bound_spec_points() {
        assert_eq!(rounds_upper_bound(16, 2, 8).unwrap(), (4, 5));
        assert_eq!(rounds_upper_bound(8, 8, 4).unwrap().0, 0);
        assert_eq!(rounds_upper_bound(4, 1, 1).unwrap(), (6, 6));
    }

    #[test]
    fn rounds_upper_bound_rejects_m_above_n() {
        assert!(matches!(
            rounds_upper_bound(4, 5, 1),
            Err(Error::TargetExceedsInitial { .. })
        ));
    }

    #[test]
    fn depth_of_full_reduction_is_log2() {
        let working = sized_working(8);
        let budget = Budget::exact(1, 8.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Hierarchical, budget);
        let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
        let query = Query::new("topic fact").unwrap();
        let (out, trace) = merge_hierarchical(working, &query, &config, &b).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(trace_max_depth(&trace), 3);
    }

    #[test]
    fn depth_of_odd_reduction_stays_bounded() {
        let working = sized_working(5);
        let budget = Budget::exact(1, 8.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Hierarchical, budget);
        let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
        let query = Query::new("topic fact").unwrap();
        let (_, trace) = merge_hierarchical(working, &query, &config, &b).unwrap();
        assert!(trace_max_depth(&trace) <= 3); // ⌈log₂ 5⌉
    }

    #[test]
    fn working_set_shrinks_by_pairs_each_layer() {
        let working = sized_working(11);
        let budget = Budget::exact(1, 8.0);
        let config = MergeConfig::new(Strategy::Symmetric, Schedule::Hierarchical, budget);
        let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
        let query = Query::new("topic fact").unwrap();
        let (out, trace) = merge_hierarchical(working, &query, &config, &b).unwrap();
        let mut size = 11usize;
        for pairs in trace.pairs_per_layer() {
            assert!(pairs >= 1);
            size -= pairs;
        }
        assert_eq!(size, out.len());
    }

    #[test]
    fn sequential_matches_oracle_replay_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let query = Query::new("shared topic").unwrap();
        for _ in 0..20 {
            let n = rng.gen_range(2..=10);
            let working: Vec<ScoredChunk> = (0..n)
                .map(|i| {
                    scored(
                        i as u64,
                        &format!("shared item {i}."),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let budget = Budget::exact(1, 4.0);
            let config = MergeConfig::new(Strategy::Symmetric, Schedule::Sequential, budget);
            let b = backends(&UniformMock { vocab: 4 }, &ExtractiveFuser);
            let (_, trace) = merge_sequential(working.clone(), &query, &config, &b).unwrap();

            // replay with brute-force pair selection and identical rescoring
            let mut pool = working;
            let mut ids = IdGen::after(pool.iter().map(|c| c.id()));
            for node in &trace.nodes {
                let mut best: Option<(f64, u64, u64)> = None;
                for i in 0..pool.len() {
                    for j in (i + 1)..pool.len() {
                        let sum = pool[i].score + pool[j].score;
                        let lo = pool[i].id().0.min(pool[j].id().0);
                        let hi = pool[i].id().0.max(pool[j].id().0);
                        if best.map_or(true, |b| (sum, lo, hi) < b) {
                            best = Some((sum, lo, hi));
                        }
                    }
                }
                let (_, lo, hi) = best.unwrap();
                let mut expected = [
                    pool.iter().find(|c| c.id().0 == lo).unwrap().clone(),
                    pool.iter().find(|c| c.id().0 == hi).unwrap().clone(),
                ];
                expected.sort_by(by_score_then_id);
                assert_eq!(
                    (node.left, node.right),
                    (expected[0].id(), expected[1].id())
                );
                let a = expected[0].clone();
                let bch = expected[1].clone();
                let fused = crate::fusion::extractive_fuse(
                    &a.chunk,
                    &bch.chunk,
                    &query,
                    Strategy::Symmetric,
                    ids.next_id(),
                    &T,
                );
                let value = score(&LexicalOverlap, &fused, &query).unwrap();
                pool.retain(|c| c.id().0 != lo && c.id().0 != hi);
                pool.push(ScoredChunk::new(fused, value));
            }
            assert_eq!(pool.len(), 1);
        }
    }
}
