//! Query-aware context merging for retrieval-augmented generation.
//!
//! Instead of truncating retrieved chunks to the top-k, this crate
//! synthesizes a compact context under a token budget by iteratively
//! fusing chunk pairs:
//!
//! - **symmetric merging** consolidates the two weakest-scoring chunks per
//!   step, recovering evidence from the long tail;
//! - **asymmetric merging** picks the weakest chunk and fuses it into the
//!   anchor that predicts it best (minimum conditional NLL), host-first;
//! - **hierarchical scheduling** fuses all disjoint planned pairs per
//!   layer concurrently, giving logarithmic depth and bounded batch
//!   rounds.
//!
//! Every backend has a deterministic offline implementation (lexical or
//! fixed-table scoring, bigram/uniform NLL, extractive or replay fusion),
//! so merging, evaluation, and benchmarking run without a model server;
//! OpenAI-compatible HTTP backends slot into the same traits for live use.
//!
//! ## Examples
//!
//! Each major capability has a runnable example:
//!
//! ```bash
//! cargo run -p ctxmerge --example budget_and_topk      # budgets + baseline selection
//! cargo run -p ctxmerge --example symmetric_merge      # sequential weak-signal fusion
//! cargo run -p ctxmerge --example asymmetric_merge     # NLL-anchored fusion
//! cargo run -p ctxmerge --example hierarchical_merge   # layered parallel schedule
//! cargo run -p ctxmerge --example similarity_matrix    # cosine/NLL pairwise matrices
//! cargo run -p ctxmerge --example qa_eval              # EM/F1/Accuracy harness
//! cargo run -p ctxmerge --example latency_bench        # simulated-delay speedup
//! cargo run -p ctxmerge --example trace_export         # DOT + JSONL merge traces
//! cargo run -p ctxmerge --example remote_backends      # wiring live HTTP endpoints
//! ```
//!
//! The `ctxmerge` binary exposes the same functionality as subcommands
//! (`merge`, `topk`, `simmatrix`, `eval`, `bench`); see the README.

pub mod chunk;
pub mod cli;
pub mod config;
pub mod embed;
pub mod engine;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod likelihood;
pub mod remote;
pub mod scoring;
pub mod text;
pub mod trace;

pub use chunk::{
    compute_budget, total_length, total_length_scored, Budget, Chunk, ChunkId, IdGen, Query,
    ScoredChunk, Tokenizer, WhitespaceTokenizer,
};
pub use engine::{
    batch_rounds, merge, merge_hierarchical, merge_sequential, plan_asymmetric_layer,
    plan_symmetric_layer, rounds_upper_bound, select_pair_symmetric, select_source_and_anchor,
    Backends, LayerPlan, MergeConfig, Schedule,
};
pub use error::{Error, Result};
pub use fusion::{
    extractive_fuse, fuse, render_prompt, ExtractiveFuser, FusedText, Fuser, PromptTemplate,
    ReplayFuser, TemplateName, TemplateSet,
};
pub use likelihood::{
    best_anchor, conditional_nll, pairwise_matrix, BigramOracle, MatrixMetric, NllModel,
    PairwiseMatrix, UniformMock,
};
pub use scoring::{score, score_batch, select_topk, FixedTable, LexicalOverlap, Scorer};
pub use trace::{trace_max_depth, MergeTrace, Strategy, TraceNode};
