//! Command-line entry point: `merge`, `topk`, `simmatrix`, `eval`, and
//! `bench` subcommands over the library, with JSON config loading and
//! machine-readable failure output.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::chunk::{
    compute_budget, load_chunks_jsonl, total_length_scored, write_context_jsonl, ChunkFile,
    Query, ScoredChunk, WhitespaceTokenizer,
};
use crate::config::AppConfig;
use crate::engine::{
    batch_rounds, merge, plan_layer, select_pair_symmetric, select_source_and_anchor, Backends,
    MergeConfig, Schedule,
};
use crate::error::{Error, Result};
use crate::eval::{
    bench_latency, evaluate_pipeline, latency_csv, load_records_jsonl, AnswerGenerator,
    BenchSetting, EvalRecord, Pipeline, ReplayAnswers,
};
use crate::fusion::{ExtractiveFuser, Fuser, ReplayFuser};
use crate::likelihood::{pairwise_matrix, BigramOracle, MatrixMetric, NllModel, UniformMock};
use crate::remote::{RemoteChatAnswers, RemoteChatFuser, RemoteLogprob, RemoteReranker};
use crate::scoring::{score_batch, select_topk, FixedTable, LexicalOverlap, Scorer};
use crate::trace::Strategy;

#[derive(Debug, Parser)]
#[command(
    name = "ctxmerge",
    version,
    about = "Query-aware context merging for retrieval-augmented generation"
)]
pub struct Cli {
    /// JSON config file (endpoints, defaults, template overrides).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge a chunk file into a budgeted context.
    Merge(MergeArgs),
    /// Top-k selection baseline over a chunk file.
    Topk(TopkArgs),
    /// Pairwise similarity matrix (cosine or NLL) as CSV.
    Simmatrix(SimmatrixArgs),
    /// Evaluate a QA dataset under a context pipeline.
    Eval(EvalArgs),
    /// Latency comparison of sequential vs hierarchical merging with a
    /// simulated fusion delay.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Chunk JSONL file, one {"id"?, "text", "score"?} object per line.
    #[arg(long)]
    pub chunks: PathBuf,
    /// Query text.
    #[arg(long, conflicts_with = "query_file")]
    pub query: Option<String>,
    /// File holding the query text.
    #[arg(long)]
    pub query_file: Option<PathBuf>,
}

impl InputArgs {
    fn query(&self) -> Result<Query> {
        let text = match (&self.query, &self.query_file) {
            (Some(text), _) => text.clone(),
            (None, Some(path)) => std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?
                .trim()
                .to_string(),
            (None, None) => {
                return Err(Error::Config("provide --query or --query-file".into()))
            }
        };
        Query::new(text)
    }
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// symmetric | asymmetric
    #[arg(long)]
    pub strategy: Option<String>,
    /// sequential | hierarchical
    #[arg(long)]
    pub schedule: Option<String>,
    /// Budget multiplier over the average chunk length.
    #[arg(long)]
    pub multiplier: Option<f64>,
    /// Concurrency limit for hierarchical layers.
    #[arg(long = "b")]
    pub b: Option<usize>,
    /// Stop once the working set is this small.
    #[arg(long, default_value_t = 1)]
    pub target: usize,
    /// lexical | rerank | fixed:<file>
    #[arg(long)]
    pub scorer: Option<String>,
    /// bigram | uniform:<V> | remote
    #[arg(long)]
    pub nll: Option<String>,
    /// extractive | remote | replay:<file>
    #[arg(long)]
    pub fuser: Option<String>,
    /// Write the merged context JSONL here (stdout otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the merge trace as a DOT digraph.
    #[arg(long)]
    pub trace_dot: Option<PathBuf>,
    /// Write the merge trace as a JSONL event log.
    #[arg(long)]
    pub trace_events: Option<PathBuf>,
    /// Print the first layer plan without any fusion call.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct TopkArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// lexical | rerank | fixed:<file>; file scores are used when complete
    /// and no scorer is forced.
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimmatrixArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// cosine | nll
    #[arg(long, default_value = "cosine")]
    pub metric: String,
    /// bow | bow:<dim> | table:<file>
    #[arg(long, default_value = "bow")]
    pub embed: String,
    /// bigram | uniform:<V> | remote
    #[arg(long)]
    pub nll: Option<String>,
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset JSONL: {"question", "answers", "chunks", "dataset"?}.
    #[arg(long)]
    pub data: PathBuf,
    /// topk | merge
    #[arg(long)]
    pub method: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub multiplier: Option<f64>,
    #[arg(long = "b")]
    pub b: Option<usize>,
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long)]
    pub nll: Option<String>,
    #[arg(long)]
    pub fuser: Option<String>,
    /// replay:<file> | remote
    #[arg(long)]
    pub gen: String,
    /// Records evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Include wall-clock columns (breaks byte-for-byte reproducibility).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Dataset JSONL to bench on; a synthetic instance is used otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic instance size when no dataset is given.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Reduce each instance to this many chunks.
    #[arg(long, default_value_t = 2)]
    pub target: usize,
    /// Simulated per-fusion delay in milliseconds.
    #[arg(long, default_value_t = 50)]
    pub delay_ms: u64,
    #[arg(long = "b")]
    pub b: Option<usize>,
    /// symmetric | asymmetric
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses argv and runs; returns the process exit code. Usage errors exit
/// 2, runtime failures exit 1 with a machine-readable JSON line on stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let chain = error_chain(&e);
            let payload = serde_json::json!({
                "error": { "message": chain[0], "chain": chain }
            });
            eprintln!("{payload}");
            1
        }
    }
}

fn error_chain(e: &Error) -> Vec<String> {
    let mut chain = vec![e.to_string()];
    let mut source = std::error::Error::source(e);
    while let Some(cause) = source {
        chain.push(cause.to_string());
        source = cause.source();
    }
    chain
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if config.tokenizer != "whitespace" {
        return Err(Error::Config(format!(
            "unknown tokenizer {:?} (only \"whitespace\" is built in)",
            config.tokenizer
        )));
    }
    log::info!("resolved config hash {}", config.resolved_hash());
    match cli.command {
        Command::Merge(args) => cmd_merge(args, &config),
        Command::Topk(args) => cmd_topk(args, &config),
        Command::Simmatrix(args) => cmd_simmatrix(args, &config),
        Command::Eval(args) => cmd_eval(args, &config),
        Command::Bench(args) => cmd_bench(args, &config),
    }
}

fn build_scorer(spec: &str, config: &AppConfig) -> Result<Box<dyn Scorer>> {
    if let Some(path) = spec.strip_prefix("fixed:") {
        return Ok(Box::new(FixedTable::from_file(Path::new(path))?));
    }
    match spec {
        "lexical" => Ok(Box::new(LexicalOverlap)),
        "rerank" => Ok(Box::new(RemoteReranker::new(config.rerank_endpoint()?)?)),
        other => Err(Error::Config(format!(
            "unknown scorer {other:?} (expected lexical|rerank|fixed:<file>)"
        ))),
    }
}

fn build_nll(spec: &str, config: &AppConfig) -> Result<Box<dyn NllModel>> {
    if let Some(v) = spec.strip_prefix("uniform:") {
        let vocab: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("bad uniform vocabulary size {v:?}")))?;
        if vocab < 2 {
            return Err(Error::Config("uniform vocabulary must be at least 2".into()));
        }
        return Ok(Box::new(UniformMock { vocab }));
    }
    match spec {
        "bigram" => Ok(Box::new(BigramOracle::default())),
        "remote" => Ok(Box::new(
            RemoteLogprob::new(config.logprob_endpoint()?, config.logprob_model.clone())?
                .with_anchor_token_limit(config.anchor_token_limit),
        )),
        other => Err(Error::Config(format!(
            "unknown NLL backend {other:?} (expected bigram|uniform:<V>|remote)"
        ))),
    }
}

fn build_fuser(spec: &str, config: &AppConfig) -> Result<Box<dyn Fuser>> {
    if let Some(path) = spec.strip_prefix("replay:") {
        return Ok(Box::new(ReplayFuser::from_file(Path::new(path))?));
    }
    match spec {
        "extractive" => Ok(Box::new(ExtractiveFuser)),
        "remote" => {
            let mut fuser = RemoteChatFuser::new(
                config.chat_endpoint()?,
                config.chat_model.clone(),
                config.template_set()?,
            )?;
            fuser.seed = config.seed;
            Ok(Box::new(fuser))
        }
        other => Err(Error::Config(format!(
            "unknown fuser {other:?} (expected extractive|remote|replay:<file>)"
        ))),
    }
}

fn build_generator(spec: &str, config: &AppConfig) -> Result<Box<dyn AnswerGenerator>> {
    if let Some(path) = spec.strip_prefix("replay:") {
        return Ok(Box::new(ReplayAnswers::from_file(Path::new(path))?));
    }
    match spec {
        "remote" => {
            let mut generator =
                RemoteChatAnswers::new(config.chat_endpoint()?, config.chat_model.clone())?;
            generator.seed = config.seed;
            Ok(Box::new(generator))
        }
        other => Err(Error::Config(format!(
            "unknown generator {other:?} (expected replay:<file>|remote)"
        ))),
    }
}

fn build_embedder(spec: &str) -> Result<Box<dyn crate::embed::Embedder>> {
    if let Some(path) = spec.strip_prefix("table:") {
        return Ok(Box::new(crate::embed::TableEmbedder::from_file(Path::new(
            path,
        ))?));
    }
    if let Some(dim) = spec.strip_prefix("bow:") {
        let dim: usize = dim
            .parse()
            .map_err(|_| Error::Config(format!("bad bow dimension {dim:?}")))?;
        return Ok(Box::new(crate::embed::BowEmbedder { dim }));
    }
    match spec {
        "bow" => Ok(Box::new(crate::embed::BowEmbedder::default())),
        other => Err(Error::Config(format!(
            "unknown embedder {other:?} (expected bow|bow:<dim>|table:<file>)"
        ))),
    }
}

fn parse_strategy(spec: Option<&str>, config: &AppConfig) -> Result<Strategy> {
    let s = spec.unwrap_or(&config.defaults.strategy);
    Strategy::from_str(s).map_err(Error::Config)
}

fn parse_schedule(spec: Option<&str>, config: &AppConfig) -> Result<Schedule> {
    let s = spec.unwrap_or(&config.defaults.schedule);
    Schedule::from_str(s).map_err(Error::Config)
}

fn emit(out: Option<&PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| Error::io(path.display().to_string(), e)),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Scores the file's chunks: provided file scores are used when complete
/// and no scorer was forced; otherwise the backend scores everything.
fn score_file(
    file: &ChunkFile,
    query: &Query,
    scorer_spec: Option<&str>,
    config: &AppConfig,
) -> Result<Vec<ScoredChunk>> {
    if scorer_spec.is_none() && file.all_scores_provided() {
        return Ok(file
            .chunks
            .iter()
            .zip(&file.provided_scores)
            .map(|(chunk, score)| ScoredChunk::new(chunk.clone(), score.expect("complete")))
            .collect());
    }
    if file.any_score_provided() {
        log::warn!("file scores are ignored; rescoring everything with one backend");
    }
    let scorer = build_scorer(scorer_spec.unwrap_or("lexical"), config)?;
    score_batch(&*scorer, &file.chunks, query)
}

fn context_jsonl(context: &[ScoredChunk]) -> String {
    let mut buf = Vec::new();
    write_context_jsonl(&mut buf, context).expect("in-memory write");
    String::from_utf8(buf).expect("valid utf8")
}

fn cmd_merge(args: MergeArgs, config: &AppConfig) -> Result<()> {
    let tokenizer = WhitespaceTokenizer;
    let file = load_chunks_jsonl(&args.input.chunks, &tokenizer)?;
    if file.chunks.is_empty() {
        return Err(Error::EmptyContextSet);
    }
    let query = args.input.query()?;
    if file.any_score_provided() {
        log::warn!("merge rescores all chunks with one backend; file scores are ignored");
    }
    let scorer = build_scorer(args.scorer.as_deref().unwrap_or("lexical"), config)?;
    let nll = build_nll(args.nll.as_deref().unwrap_or("bigram"), config)?;
    let fuser = build_fuser(args.fuser.as_deref().unwrap_or("extractive"), config)?;

    let scored = score_batch(&*scorer, &file.chunks, &query)?;
    let multiplier = args.multiplier.unwrap_or(config.defaults.multiplier);
    let budget = compute_budget(&file.chunks, multiplier)?;
    let strategy = parse_strategy(args.strategy.as_deref(), config)?;
    let schedule = parse_schedule(args.schedule.as_deref(), config)?;
    let concurrency = args.b.unwrap_or(config.defaults.concurrency).max(1);
    let merge_config = MergeConfig::new(strategy, schedule, budget)
        .with_concurrency(concurrency)
        .with_target_count(args.target);

    if args.dry_run {
        let plan_text = dry_run_plan(&scored, &merge_config, &*nll)?;
        print!("{plan_text}");
        return Ok(());
    }

    let backends = Backends {
        scorer: &*scorer,
        nll: &*nll,
        fuser: &*fuser,
        tokenizer: &tokenizer,
    };
    let initial_count = scored.len();
    match merge(scored, &query, &merge_config, &backends) {
        Ok((context, trace)) => {
            emit(args.out.as_ref(), &context_jsonl(&context))?;
            if let Some(path) = &args.trace_dot {
                std::fs::write(path, trace.to_dot())
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            if let Some(path) = &args.trace_events {
                let mut buf = Vec::new();
                trace.write_events(&mut buf)?;
                std::fs::write(path, buf)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            log::info!(
                "merged {initial_count} -> {} chunks, {} tokens (budget {}), {} fusions, {} rounds",
                context.len(),
                total_length_scored(&context),
                merge_config.budget.limit_tokens,
                trace.fusion_count(),
                batch_rounds(&trace, concurrency),
            );
            Ok(())
        }
        Err(e) => {
            if let (Some(trace), Some(path)) = (e.partial_trace(), &args.trace_dot) {
                std::fs::write(path, trace.to_dot())
                    .map_err(|io| Error::io(path.display().to_string(), io))?;
                log::warn!("partial trace written to {}", path.display());
            }
            Err(e)
        }
    }
}

fn dry_run_plan(
    scored: &[ScoredChunk],
    config: &MergeConfig,
    nll: &dyn NllModel,
) -> Result<String> {
    let mut out = format!(
        "# dry run: {} {} budget={} target={}\n",
        config.strategy, config.schedule, config.budget.limit_tokens, config.target_count
    );
    let total = total_length_scored(scored);
    if total <= config.budget.limit_tokens || scored.len() <= config.target_count {
        out.push_str(&format!(
            "within budget ({total} <= {} tokens); nothing to merge\n",
            config.budget.limit_tokens
        ));
        return Ok(out);
    }
    match config.schedule {
        Schedule::Hierarchical => {
            let plan = plan_layer(config.strategy, scored.to_vec(), nll, 0)?;
            for (i, (first, second)) in plan.pairs.iter().enumerate() {
                let roles = match config.strategy {
                    Strategy::Symmetric => ("", ""),
                    Strategy::Asymmetric => (" (source)", " (anchor)"),
                };
                out.push_str(&format!(
                    "pair {i}: #{}{} score={:.4} + #{}{} score={:.4}\n",
                    first.id(),
                    roles.0,
                    first.score,
                    second.id(),
                    roles.1,
                    second.score
                ));
            }
            for leftover in &plan.leftovers {
                out.push_str(&format!(
                    "leftover: #{} score={:.4}\n",
                    leftover.id(),
                    leftover.score
                ));
            }
        }
        Schedule::Sequential => match config.strategy {
            Strategy::Symmetric => {
                let (a, b) = select_pair_symmetric(scored)?;
                out.push_str(&format!(
                    "iteration 0: fuse #{} score={:.4} + #{} score={:.4}\n",
                    a.id(),
                    a.score,
                    b.id(),
                    b.score
                ));
            }
            Strategy::Asymmetric => {
                let (source, anchor) = select_source_and_anchor(scored, nll)?;
                out.push_str(&format!(
                    "iteration 0: fuse #{} (source) score={:.4} into #{} (anchor) score={:.4}\n",
                    source.id(),
                    source.score,
                    anchor.id(),
                    anchor.score
                ));
            }
        },
    }
    out.push_str("later layers depend on fused results; no fusion was called\n");
    Ok(out)
}

fn cmd_topk(args: TopkArgs, config: &AppConfig) -> Result<()> {
    let tokenizer = WhitespaceTokenizer;
    let file = load_chunks_jsonl(&args.input.chunks, &tokenizer)?;
    if file.chunks.is_empty() {
        return Err(Error::EmptyContextSet);
    }
    if args.k < 1 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    let query = args.input.query()?;
    let scored = score_file(&file, &query, args.scorer.as_deref(), config)?;
    let top = select_topk(&scored, args.k);
    log::info!(
        "top-{} of {} chunks, {} tokens",
        args.k,
        scored.len(),
        total_length_scored(&top)
    );
    emit(args.out.as_ref(), &context_jsonl(&top))
}

fn cmd_simmatrix(args: SimmatrixArgs, config: &AppConfig) -> Result<()> {
    let tokenizer = WhitespaceTokenizer;
    let file = load_chunks_jsonl(&args.input.chunks, &tokenizer)?;
    let query = args.input.query()?;
    let scored = score_file(&file, &query, args.scorer.as_deref(), config)?;
    let metric = match args.metric.as_str() {
        "cosine" => MatrixMetric::Cosine,
        "nll" => MatrixMetric::Nll,
        other => {
            return Err(Error::Config(format!(
                "unknown metric {other:?} (expected cosine|nll)"
            )))
        }
    };
    let matrix = match metric {
        MatrixMetric::Cosine => {
            let embedder = build_embedder(&args.embed)?;
            pairwise_matrix(&scored, metric, Some(&*embedder), None)?
        }
        MatrixMetric::Nll => {
            let nll = build_nll(args.nll.as_deref().unwrap_or("bigram"), config)?;
            pairwise_matrix(&scored, metric, None, Some(&*nll))?
        }
    };
    emit(args.out.as_ref(), &matrix.to_csv())
}

fn cmd_eval(args: EvalArgs, config: &AppConfig) -> Result<()> {
    let tokenizer = WhitespaceTokenizer;
    let records = load_records_jsonl(&args.data, &tokenizer)?;
    let scorer = build_scorer(args.scorer.as_deref().unwrap_or("lexical"), config)?;
    let nll = build_nll(args.nll.as_deref().unwrap_or("bigram"), config)?;
    let fuser = build_fuser(args.fuser.as_deref().unwrap_or("extractive"), config)?;
    let generator = build_generator(&args.gen, config)?;
    let templates = config.template_set()?;

    let pipeline = match args.method.as_str() {
        "topk" => {
            if args.k < 1 {
                return Err(Error::Config("--k must be at least 1".into()));
            }
            Pipeline::TopK { k: args.k }
        }
        "merge" => Pipeline::Merge {
            strategy: parse_strategy(args.strategy.as_deref(), config)?,
            schedule: parse_schedule(args.schedule.as_deref(), config)?,
            multiplier: args.multiplier.unwrap_or(config.defaults.multiplier),
            concurrency: args.b.unwrap_or(config.defaults.concurrency).max(1),
            rescore_fused: true,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown method {other:?} (expected topk|merge)"
            )))
        }
    };

    let backends = crate::eval::EvalBackends {
        scorer: &*scorer,
        nll: &*nll,
        fuser: &*fuser,
        tokenizer: &tokenizer,
        generator: &*generator,
        templates: &templates,
    };
    let report = evaluate_pipeline(&records, &pipeline, &backends, args.jobs)?;
    let csv = report.to_csv(args.timings);
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv).map_err(|e| Error::io(path.display().to_string(), e))?;
            print!("{}", report.to_table());
        }
        None => print!("{csv}"),
    }
    for (index, message) in &report.errors {
        log::warn!("record {index} failed: {message}");
    }
    Ok(())
}

fn synthetic_records(n: usize) -> Vec<EvalRecord> {
    let tokenizer = WhitespaceTokenizer;
    let mut ids = crate::chunk::IdGen::new();
    let chunks = (0..n)
        .map(|i| {
            crate::chunk::Chunk::original(
                ids.next_id(),
                format!("bench topic item {i} carries detail {i}."),
                &tokenizer,
            )
        })
        .collect();
    vec![EvalRecord {
        query: Query::new("bench topic detail").expect("nonempty"),
        chunks,
        gold_answers: vec!["unused".into()],
        dataset_tag: "synthetic".into(),
    }]
}

fn cmd_bench(args: BenchArgs, config: &AppConfig) -> Result<()> {
    let tokenizer = WhitespaceTokenizer;
    let records = match &args.data {
        Some(path) => load_records_jsonl(path, &tokenizer)?,
        None => synthetic_records(args.n),
    };
    let strategy = parse_strategy(args.strategy.as_deref(), config)?;
    let settings = [
        BenchSetting {
            strategy,
            schedule: Schedule::Sequential,
        },
        BenchSetting {
            strategy,
            schedule: Schedule::Hierarchical,
        },
    ];
    let concurrency = args.b.unwrap_or(config.defaults.concurrency).max(1);
    let nll = UniformMock { vocab: 16 };
    let rows = bench_latency(
        &records,
        &settings,
        Duration::from_millis(args.delay_ms),
        concurrency,
        args.target.max(1),
        &LexicalOverlap,
        &nll,
        &tokenizer,
    )?;
    emit(args.out.as_ref(), &latency_csv(&rows))?;
    let mean = |schedule: &str| {
        let subset: Vec<u64> = rows
            .iter()
            .filter(|r| r.method.ends_with(schedule))
            .map(|r| r.wall_ms)
            .collect();
        subset.iter().sum::<u64>() as f64 / subset.len().max(1) as f64
    };
    let sequential = mean("sequential");
    let hierarchical = mean("hierarchical");
    if hierarchical > 0.0 {
        log::info!(
            "mean wall: sequential {sequential:.0} ms, hierarchical {hierarchical:.0} ms, speedup {:.2}x",
            sequential / hierarchical
        );
    }
    Ok(())
}
