//! Merge traces: the binary forest recording every fusion a run performed,
//! with DOT and JSONL export for inspection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chunk::{Chunk, ChunkId, ScoredChunk};
use crate::error::{Error, Result};

/// Which merging rule selected and fused a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Fuse the two lowest-scoring chunks as equals.
    Symmetric,
    /// Fuse the lowest-scoring chunk into the anchor that predicts it best.
    Asymmetric,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Symmetric => write!(f, "symmetric"),
            Strategy::Asymmetric => write!(f, "asymmetric"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "symmetric" | "sym" => Ok(Strategy::Symmetric),
            "asymmetric" | "asym" => Ok(Strategy::Asymmetric),
            other => Err(format!("unknown strategy {other:?} (expected symmetric|asymmetric)")),
        }
    }
}

/// One recorded fusion. For asymmetric fusions `left` is the source,
/// `right` the anchor, and `anchor` repeats the anchor id; for symmetric
/// fusions `left` is the lower-scoring parent and `anchor` is `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceNode {
    pub result: ChunkId,
    pub left: ChunkId,
    pub right: ChunkId,
    pub layer: usize,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<ChunkId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Snapshot of a chunk at the moment it entered the trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkMeta {
    pub score: f64,
    pub token_len: usize,
    pub depth: usize,
}

/// The full record of a merge run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeTrace {
    pub nodes: Vec<TraceNode>,
    pub initial: BTreeSet<ChunkId>,
    pub finals: BTreeSet<ChunkId>,
    /// score/length/depth per chunk id seen by the run.
    pub meta: BTreeMap<ChunkId, ChunkMeta>,
}

impl MergeTrace {
    pub fn new(working: &[ScoredChunk]) -> Self {
        let mut trace = MergeTrace::default();
        for sc in working {
            trace.initial.insert(sc.id());
            trace.note_chunk(&sc.chunk, sc.score);
        }
        trace
    }

    pub(crate) fn note_chunk(&mut self, chunk: &Chunk, score: f64) {
        self.meta.insert(
            chunk.id,
            ChunkMeta {
                score,
                token_len: chunk.token_len,
                depth: chunk.depth,
            },
        );
    }

    pub(crate) fn record(&mut self, node: TraceNode, result: &Chunk, score: f64) {
        self.note_chunk(result, score);
        self.nodes.push(node);
    }

    pub(crate) fn set_finals(&mut self, working: &[ScoredChunk]) {
        self.finals = working.iter().map(|sc| sc.id()).collect();
    }

    /// Total fusions performed.
    pub fn fusion_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of pairs fused in each layer, in layer order.
    pub fn pairs_per_layer(&self) -> Vec<usize> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for node in &self.nodes {
            *counts.entry(node.layer).or_insert(0) += 1;
        }
        counts.into_values().collect()
    }

    /// Maximum generation depth over the final chunks.
    pub fn max_depth(&self) -> usize {
        self.finals
            .iter()
            .filter_map(|id| self.meta.get(id))
            .map(|m| m.depth)
            .max()
            .unwrap_or(0)
    }

    /// Structural checks: the parent relation is a forest (each id consumed
    /// at most once), layers are nondecreasing, and the leaves reachable
    /// from the final set are exactly the initial ids, without overlap.
    pub fn verify(&self) -> Result<()> {
        let mut consumed = BTreeSet::new();
        let mut produced = BTreeMap::new();
        let mut last_layer = 0usize;
        for node in &self.nodes {
            if node.layer < last_layer {
                return Err(Error::Backend(format!(
                    "trace layers regress at node {}",
                    node.result
                )));
            }
            last_layer = node.layer;
            for parent in [node.left, node.right] {
                if !consumed.insert(parent) {
                    return Err(Error::Backend(format!(
                        "chunk {parent} consumed by more than one fusion"
                    )));
                }
            }
            if produced.insert(node.result, node).is_some() {
                return Err(Error::Backend(format!(
                    "chunk {} produced twice",
                    node.result
                )));
            }
        }

        let mut leaves = BTreeSet::new();
        let mut stack: Vec<ChunkId> = self.finals.iter().copied().collect();
        while let Some(id) = stack.pop() {
            match produced.get(&id) {
                Some(node) => {
                    stack.push(node.left);
                    stack.push(node.right);
                }
                None => {
                    if !leaves.insert(id) {
                        return Err(Error::Backend(format!(
                            "initial chunk {id} reachable from two final chunks"
                        )));
                    }
                }
            }
        }
        if leaves != self.initial {
            return Err(Error::Backend(
                "provenance union of final chunks differs from initial set".into(),
            ));
        }
        Ok(())
    }

    /// Graphviz digraph of the merge forest. Node labels carry score,
    /// token length, and depth; edges carry the layer and strategy.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph merge_trace {\n  rankdir=BT;\n");
        for (id, meta) in &self.meta {
            out.push_str(&format!(
                "  c{id} [label=\"#{id}\\nscore={:.4} len={} depth={}\"];\n",
                meta.score, meta.token_len, meta.depth
            ));
        }
        for node in &self.nodes {
            for parent in [node.left, node.right] {
                let role = match node.anchor {
                    Some(a) if a == parent => " anchor",
                    Some(_) => " source",
                    None => "",
                };
                out.push_str(&format!(
                    "  c{parent} -> c{} [label=\"L{} {}{role}\"];\n",
                    node.result, node.layer, node.strategy
                ));
            }
        }
        out.push_str("}\n");
        out
    }

    /// One JSON object per fusion event.
    pub fn write_events<W: Write>(&self, mut w: W) -> Result<()> {
        for node in &self.nodes {
            let tokens = self.meta.get(&node.result).map(|m| m.token_len);
            let event = serde_json::json!({
                "event": "fusion",
                "layer": node.layer,
                "strategy": node.strategy,
                "left": node.left,
                "right": node.right,
                "anchor": node.anchor,
                "result": node.result,
                "result_tokens": tokens,
                "warnings": node.warnings,
            });
            writeln!(w, "{event}").map_err(|e| Error::io("<trace events>", e))?;
        }
        Ok(())
    }
}

/// Maximum generation depth over a trace's final chunks.
pub fn trace_max_depth(trace: &MergeTrace) -> usize {
    trace.max_depth()
}
