//! The pairwise fusion operator: prompt-templated LLM fusion for live runs
//! and a deterministic extractive fuser for offline work and tests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use crate::chunk::{Chunk, ChunkId, Query, Tokenizer};
use crate::error::{Error, Result};
use crate::text::{normalized_words, split_sentences};
use crate::trace::Strategy;

pub const WARN_EXTRACTIVE_FALLBACK: &str = "extractive-fallback";
pub const WARN_GROWTH: &str = "growth";

/// Which prompt a template body belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateName {
    SymmetricMerge,
    AsymmetricMerge,
    AnswerGeneration,
}

/// A prompt body with `{placeholder}` slots.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

impl PromptTemplate {
    /// The built-in template shipped with the crate.
    pub fn builtin(name: TemplateName) -> Self {
        let body = match name {
            TemplateName::SymmetricMerge => include_str!("../prompts/symmetric_merge.txt"),
            TemplateName::AsymmetricMerge => include_str!("../prompts/asymmetric_merge.txt"),
            TemplateName::AnswerGeneration => include_str!("../prompts/answer_generation.txt"),
        };
        PromptTemplate {
            name,
            body: body.to_string(),
        }
    }

    pub fn from_file(name: TemplateName, path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(PromptTemplate { name, body })
    }
}

/// The three templates a run needs.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub symmetric: PromptTemplate,
    pub asymmetric: PromptTemplate,
    pub generation: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            symmetric: PromptTemplate::builtin(TemplateName::SymmetricMerge),
            asymmetric: PromptTemplate::builtin(TemplateName::AsymmetricMerge),
            generation: PromptTemplate::builtin(TemplateName::AnswerGeneration),
        }
    }
}

impl TemplateSet {
    pub fn merge_template(&self, mode: Strategy) -> &PromptTemplate {
        match mode {
            Strategy::Symmetric => &self.symmetric,
            Strategy::Asymmetric => &self.asymmetric,
        }
    }
}

fn placeholder_at(body: &str, open: usize) -> Option<(&str, usize)> {
    let rest = &body[open + 1..];
    let close = rest.find('}')?;
    let name = &rest[..close];
    if !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c == '_')
    {
        Some((name, open + 1 + close + 1))
    } else {
        None
    }
}

/// Exact single-pass substitution of `{placeholder}` slots. Substituted
/// values are not rescanned, nothing is escaped or truncated, and any
/// placeholder missing from the bindings is an error naming it.
pub fn render_prompt(template: &PromptTemplate, bindings: &BTreeMap<&str, &str>) -> Result<String> {
    let body = &template.body;
    let mut out = String::with_capacity(body.len());
    let mut rest = body.as_str();
    while let Some(open_rel) = rest.find('{') {
        out.push_str(&rest[..open_rel]);
        let remaining = &rest[open_rel..];
        match placeholder_at(remaining, 0) {
            Some((name, after)) => {
                let value = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &remaining[after..];
            }
            None => {
                out.push('{');
                rest = &remaining[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Fused text plus any warnings the backend wants recorded in the trace.
#[derive(Debug, Clone)]
pub struct FusedText {
    pub text: String,
    pub warnings: Vec<String>,
}

impl FusedText {
    pub fn clean(text: String) -> Self {
        FusedText {
            text,
            warnings: Vec::new(),
        }
    }
}

/// A fusion backend. For asymmetric mode `a` is the anchor/host and `b`
/// the source being absorbed.
pub trait Fuser: Send + Sync {
    fn kind(&self) -> &'static str;

    fn fuse_text(&self, a: &Chunk, b: &Chunk, query: &Query, mode: Strategy) -> Result<FusedText>;

    /// Maximum in-flight requests the backend tolerates; `None` means the
    /// engine's own concurrency limit applies unchanged.
    fn max_in_flight(&self) -> Option<usize> {
        None
    }
}

/// Runs the fusion operator and builds the fused chunk: fresh id, parent
/// provenance union, depth bumped, token length recomputed. A fused text
/// longer than both parents together gets a "growth" warning (possible
/// with live backends that disobey the verbatim instruction).
pub fn fuse(
    backend: &dyn Fuser,
    a: &Chunk,
    b: &Chunk,
    query: &Query,
    mode: Strategy,
    id: ChunkId,
    tokenizer: &dyn Tokenizer,
) -> Result<(Chunk, Vec<String>)> {
    let fused = backend
        .fuse_text(a, b, query, mode)
        .map_err(|e| Error::FuseFailed {
            left: a.id,
            right: b.id,
            source: Box::new(e),
        })?;
    let chunk = Chunk::fused(id, fused.text, a, b, tokenizer);
    let mut warnings = fused.warnings;
    if chunk.token_len > a.token_len + b.token_len {
        warnings.push(WARN_GROWTH.to_string());
    }
    Ok((chunk, warnings))
}

fn overlap_count(sentence_tokens: &BTreeSet<String>, query_tokens: &BTreeSet<String>) -> usize {
    sentence_tokens.intersection(query_tokens).count()
}

/// Deterministic stand-in for LLM fusion: keep each parent's query-relevant
/// sentences, drop `b` sentences whose token set is already covered by a
/// kept `a` sentence, and emit `a`'s survivors before `b`'s. If nothing
/// overlaps the query, the highest-overlap sentence of each parent is kept
/// so the output is never empty.
pub fn extractive_merge_text(
    a_text: &str,
    b_text: &str,
    query_text: &str,
    _mode: Strategy,
) -> String {
    let query_tokens: BTreeSet<String> = normalized_words(query_text).into_iter().collect();

    let keep = |text: &str| -> Vec<(String, BTreeSet<String>)> {
        let sentences = split_sentences(text);
        let tokenized: Vec<(String, BTreeSet<String>)> = sentences
            .iter()
            .map(|s| {
                (
                    s.to_string(),
                    normalized_words(s).into_iter().collect::<BTreeSet<_>>(),
                )
            })
            .collect();
        let mut kept: Vec<(String, BTreeSet<String>)> = tokenized
            .iter()
            .filter(|(_, tokens)| overlap_count(tokens, &query_tokens) > 0)
            .cloned()
            .collect();
        if kept.is_empty() {
            // fall back to the best sentence available, earliest on ties
            if let Some(best) = tokenized
                .iter()
                .enumerate()
                .max_by(|(i, (_, x)), (j, (_, y))| {
                    overlap_count(x, &query_tokens)
                        .cmp(&overlap_count(y, &query_tokens))
                        .then(j.cmp(i))
                })
            {
                kept.push(best.1.clone());
            }
        }
        kept
    };

    let kept_a = keep(a_text);
    let kept_b = keep(b_text);

    let mut parts: Vec<String> = kept_a.iter().map(|(s, _)| s.clone()).collect();
    for (sentence, tokens) in &kept_b {
        let duplicate = kept_a
            .iter()
            .any(|(_, a_tokens)| tokens.is_subset(a_tokens));
        if !duplicate {
            parts.push(sentence.clone());
        }
    }
    parts.join(" ")
}

/// Extractive fusion as a chunk constructor.
pub fn extractive_fuse(
    a: &Chunk,
    b: &Chunk,
    query: &Query,
    mode: Strategy,
    id: ChunkId,
    tokenizer: &dyn Tokenizer,
) -> Chunk {
    let text = extractive_merge_text(&a.text, &b.text, &query.text, mode);
    Chunk::fused(id, text, a, b, tokenizer)
}

/// The deterministic extractive backend.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveFuser;

impl Fuser for ExtractiveFuser {
    fn kind(&self) -> &'static str {
        "extractive"
    }

    fn fuse_text(&self, a: &Chunk, b: &Chunk, query: &Query, mode: Strategy) -> Result<FusedText> {
        Ok(FusedText::clean(extractive_merge_text(
            &a.text, &b.text, &query.text, mode,
        )))
    }
}

/// Fixture key for one fusion call: `"<a_id>+<b_id>:<mode>"`.
pub fn replay_key(a: ChunkId, b: ChunkId, mode: Strategy) -> String {
    format!("{a}+{b}:{mode}")
}

/// Replays canned responses from a fixture file, for regression tests of
/// live-mode plumbing without a model.
#[derive(Debug, Clone, Default)]
pub struct ReplayFuser {
    responses: BTreeMap<String, String>,
}

impl ReplayFuser {
    pub fn new(responses: BTreeMap<String, String>) -> Self {
        ReplayFuser { responses }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let responses: BTreeMap<String, String> = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(ReplayFuser { responses })
    }
}

impl Fuser for ReplayFuser {
    fn kind(&self) -> &'static str {
        "replay-fixture"
    }

    fn fuse_text(&self, a: &Chunk, b: &Chunk, _query: &Query, mode: Strategy) -> Result<FusedText> {
        let key = replay_key(a.id, b.id, mode);
        self.responses
            .get(&key)
            .map(|text| FusedText::clean(text.clone()))
            .ok_or(Error::ReplayMiss(key))
    }
}

/// Wraps a fuser with a fixed per-call delay; used by the latency bench to
/// simulate model inference time.
pub struct DelayedFuser<F> {
    inner: F,
    delay: Duration,
}

impl<F: Fuser> DelayedFuser<F> {
    pub fn new(inner: F, delay: Duration) -> Self {
        DelayedFuser { inner, delay }
    }
}

impl<F: Fuser> Fuser for DelayedFuser<F> {
    fn kind(&self) -> &'static str {
        "delayed"
    }

    fn fuse_text(&self, a: &Chunk, b: &Chunk, query: &Query, mode: Strategy) -> Result<FusedText> {
        std::thread::sleep(self.delay);
        self.inner.fuse_text(a, b, query, mode)
    }

    fn max_in_flight(&self) -> Option<usize> {
        self.inner.max_in_flight()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::{ChunkId, WhitespaceTokenizer};
    use crate::trace::Strategy;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;

    fn chunk(id: u64, text: &str) -> Chunk {
        Chunk::original(ChunkId(id), text, &WhitespaceTokenizer)
    }

    fn q(text: &str) -> Query {
        Query::new(text).unwrap()
    }

    #[test]
    fn renders_single_substitution() {
        let t = PromptTemplate {
            name: TemplateName::SymmetricMerge,
            body: "Q: {query}".into(),
        };
        let rendered = render_prompt(&t, &BTreeMap::from([("query", "x")])).unwrap();
        assert_eq!(rendered, "Q: x");
    }

    #[test]
    fn missing_binding_names_the_placeholder() {
        let t = PromptTemplate {
            name: TemplateName::SymmetricMerge,
            body: "Q: {query}".into(),
        };
        let err = render_prompt(&t, &BTreeMap::new()).unwrap_err();
        assert_eq!(err.to_string(), "unbound placeholder: query");
    }

    #[test]
    fn asymmetric_template_renders_all_bindings_in_order() {
        let t = PromptTemplate::builtin(TemplateName::AsymmetricMerge);
        let bindings = BTreeMap::from([
            ("query", "THE-QUERY"),
            ("chunk_a", "THE-ANCHOR"),
            ("chunk_b", "THE-SOURCE"),
        ]);
        let rendered = render_prompt(&t, &bindings).unwrap();
        let qi = rendered.find("THE-QUERY").unwrap();
        let ai = rendered.find("THE-ANCHOR").unwrap();
        let bi = rendered.find("THE-SOURCE").unwrap();
        assert!(qi < ai && ai < bi);
        assert!(!rendered.contains("{query}"));
    }

    #[test]
    fn braces_that_are_not_placeholders_pass_through() {
        let t = PromptTemplate {
            name: TemplateName::SymmetricMerge,
            body: "keep {123} and {A} but not {query}".into(),
        };
        let rendered = render_prompt(&t, &BTreeMap::from([("query", "v")])).unwrap();
        assert_eq!(rendered, "keep {123} and {A} but not v");
    }

    #[test]
    fn substituted_values_are_not_rescanned() {
        let t = PromptTemplate {
            name: TemplateName::SymmetricMerge,
            body: "{query}".into(),
        };
        let rendered = render_prompt(&t, &BTreeMap::from([("query", "{chunk_a}")])).unwrap();
        assert_eq!(rendered, "{chunk_a}");
    }

    #[test]
    fn identical_parents_fuse_to_one_copy() {
        let text = "The dam opened in 1901. It powers the valley.";
        let a = chunk(0, text);
        let b = chunk(1, text);
        let query = q("when did the dam open and what does it power");
        let fused = extractive_fuse(&a, &b, &query, Strategy::Symmetric, ChunkId(2), &WhitespaceTokenizer);
        assert_eq!(fused.text, text);
        assert_eq!(fused.token_len, a.token_len);
    }

    #[test]
    fn subset_sentences_of_b_are_deduplicated() {
        let a = chunk(0, "The dam opened in 1901. Engineers praised the dam design.");
        let b = chunk(1, "The dam opened in 1901.");
        let query = q("dam opened design");
        let fused = extractive_fuse(&a, &b, &query, Strategy::Symmetric, ChunkId(2), &WhitespaceTokenizer);
        assert_eq!(
            fused.text,
            "The dam opened in 1901. Engineers praised the dam design."
        );
    }

    #[test]
    fn filters_irrelevant_sentences_per_mode_order() {
        let a = chunk(
            0,
            "The treaty was signed in 1848. Cucumbers grow quickly in summer. The treaty ceded vast territory.",
        );
        let b = chunk(
            1,
            "Border towns kept treaty copies. Migrating birds fly at night. The treaty text survives today.",
        );
        let query = q("treaty");
        let fused = extractive_fuse(&a, &b, &query, Strategy::Asymmetric, ChunkId(2), &WhitespaceTokenizer);
        assert_eq!(
            fused.text,
            "The treaty was signed in 1848. The treaty ceded vast territory. \
             Border towns kept treaty copies. The treaty text survives today."
        );
    }

    #[test]
    fn disjoint_relevant_sentences_concatenate() {
        let a = chunk(0, "Alpha holds the key fact.");
        let b = chunk(1, "Beta holds another key detail.");
        let query = q("key");
        let fused = extractive_fuse(&a, &b, &query, Strategy::Symmetric, ChunkId(2), &WhitespaceTokenizer);
        assert_eq!(
            fused.text,
            "Alpha holds the key fact. Beta holds another key detail."
        );
        assert_eq!(fused.token_len, a.token_len + b.token_len);
    }

    #[test]
    fn no_overlap_keeps_best_sentence_from_each() {
        let a = chunk(0, "First fact here. Second fact here.");
        let b = chunk(1, "Third note. Fourth note.");
        let query = q("zebra quagga");
        let fused = extractive_fuse(&a, &b, &query, Strategy::Symmetric, ChunkId(2), &WhitespaceTokenizer);
        assert_eq!(fused.text, "First fact here. Third note.");
    }

    #[test]
    fn bridging_sentences_survive_extraction() {
        // A short biography chunk and a long history chunk that share the
        // institution name; the query spans both.
        let a = chunk(
            0,
            "Larry Alcala earned his Bachelor of Fine Arts in Painting at the University of the Philippines in 1950. \
             He became a professor at the same university from 1951 to 1981. \
             He also received a cultural award with a travel study grant in 1975.",
        );
        let filler = "Unrelated committee minutes describe budget line items for groundskeeping. ".repeat(40);
        let b_text = format!(
            "ROTC in the Philippines began in 1912 when the Philippine Constabulary commenced with military instruction at the University of the Philippines. {filler}"
        );
        let b = chunk(1, &b_text);
        let query = q("When did military instruction start at the place where Larry Alcala was educated?");
        let fused = extractive_fuse(&a, &b, &query, Strategy::Symmetric, ChunkId(2), &WhitespaceTokenizer);
        assert!(fused
            .text
            .contains("at the University of the Philippines in 1950"));
        assert!(fused
            .text
            .contains("military instruction at the University of the Philippines"));
        assert!(fused.token_len <= a.token_len + b.token_len);
    }

    #[test]
    fn fuse_builds_provenance_and_depth() {
        let a = chunk(0, "key alpha.");
        let b = chunk(1, "key beta.");
        let query = q("key");
        let (fused, warnings) = fuse(
            &ExtractiveFuser,
            &a,
            &b,
            &query,
            Strategy::Symmetric,
            ChunkId(9),
            &WhitespaceTokenizer,
        )
        .unwrap();
        assert_eq!(fused.id, ChunkId(9));
        assert_eq!(fused.depth, 1);
        assert_eq!(
            fused.provenance,
            BTreeSet::from([ChunkId(0), ChunkId(1)])
        );
        assert!(warnings.is_empty());
    }

    #[test]
    fn replay_fuser_replays_and_reports_misses() {
        let fuser = ReplayFuser::new(BTreeMap::from([(
            "0+1:symmetric".to_string(),
            "canned".to_string(),
        )]));
        let a = chunk(0, "a.");
        let b = chunk(1, "b.");
        let query = q("x");
        let out = fuser.fuse_text(&a, &b, &query, Strategy::Symmetric).unwrap();
        assert_eq!(out.text, "canned");
        assert!(matches!(
            fuser.fuse_text(&a, &b, &query, Strategy::Asymmetric),
            Err(Error::ReplayMiss(_))
        ));
    }

    #[test]
    fn growth_beyond_parent_sum_is_flagged() {
        struct Bloater;
        impl Fuser for Bloater {
            fn kind(&self) -> &'static str {
                "bloat"
            }
            fn fuse_text(&self, _: &Chunk, _: &Chunk, _: &Query, _: Strategy) -> Result<FusedText> {
                Ok(FusedText::clean("far too many words for two tiny parents".into()))
            }
        }
        let a = chunk(0, "one.");
        let b = chunk(1, "two.");
        let (_, warnings) = fuse(
            &Bloater,
            &a,
            &b,
            &q("x"),
            Strategy::Symmetric,
            ChunkId(2),
            &WhitespaceTokenizer,
        )
        .unwrap();
        assert!(warnings.iter().any(|w| w == WARN_GROWTH));
    }

    #[test]
    fn failed_fusion_carries_pair_ids() {
        struct Broken;
        impl Fuser for Broken {
            fn kind(&self) -> &'static str {
                "broken"
            }
            fn fuse_text(&self, _: &Chunk, _: &Chunk, _: &Query, _: Strategy) -> Result<FusedText> {
                Err(Error::Backend("down".into()))
            }
        }
        let err = fuse(
            &Broken,
            &chunk(3, "a."),
            &chunk(7, "b."),
            &q("x"),
            Strategy::Symmetric,
            ChunkId(8),
            &WhitespaceTokenizer,
        )
        .unwrap_err();
        match err {
            Error::FuseFailed { left, right, .. } => {
                assert_eq!(left, ChunkId(3));
                assert_eq!(right, ChunkId(7));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn arbitrary_sentences() -> impl proptest::strategy::Strategy<Value = String> {
        let word = prop::sample::select(vec![
            "river", "treaty", "dam", "signal", "archive", "border", "winter", "market",
            "council", "bridge",
        ]);
        let sentence = prop::collection::vec(word, 1..6)
            .prop_map(|words| format!("{}.", words.join(" ")));
        prop::collection::vec(sentence, 1..5).prop_map(|s| s.join(" "))
    }

    proptest! {
        /// token_len(fused) ≤ token_len(a) + token_len(b), always.
        #[test]
        fn extractive_length_bound(
            a_text in arbitrary_sentences(),
            b_text in arbitrary_sentences(),
            query_word in prop::sample::select(vec!["river", "treaty", "nothing"]),
        ) {
            let a = chunk(0, &a_text);
            let b = chunk(1, &b_text);
            let query = q(query_word);
            for mode in [Strategy::Symmetric, Strategy::Asymmetric] {
                let fused = extractive_fuse(&a, &b, &query, mode, ChunkId(2), &WhitespaceTokenizer);
                prop_assert!(fused.token_len <= a.token_len + b.token_len);
            }
        }

        /// All retained anchor sentences precede all retained source
        /// sentences, and the output is deterministic.
        #[test]
        fn extractive_mode_order_and_determinism(
            a_text in arbitrary_sentences(),
            b_text in arbitrary_sentences(),
        ) {
            let query = q("treaty river");
            let once = extractive_merge_text(&a_text, &b_text, &query.text, Strategy::Asymmetric);
            let twice = extractive_merge_text(&a_text, &b_text, &query.text, Strategy::Asymmetric);
            prop_assert_eq!(&once, &twice);

            // every output sentence is a sentence of a parent, a's first
            let a_sents: Vec<&str> = split_sentences(&a_text).into_iter().collect();
            let out_sents: Vec<&str> = split_sentences(&once).into_iter().collect();
            let mut seen_b = false;
            for s in &out_sents {
                let from_a = a_sents.contains(s);
                if !from_a {
                    seen_b = true;
                } else {
                    prop_assert!(!seen_b, "anchor sentence after source sentence: {}", once);
                }
            }
        }
    }
}
