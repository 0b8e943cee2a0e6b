//! HTTP backends: reranker scoring, echo-logprob NLL, and chat fusion /
//! answer generation against OpenAI-compatible endpoints.
//!
//! All requests go through one retry path: transport failures, timeouts,
//! 429 and 5xx responses are retried with exponential backoff up to the
//! configured attempt limit, then surfaced as a retriable transport error.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::chunk::{Chunk, Query};
use crate::error::{Error, Result};
use crate::eval::AnswerGenerator;
use crate::fusion::{extractive_merge_text, render_prompt, FusedText, Fuser, TemplateSet};
use crate::likelihood::NllModel;
use crate::scoring::Scorer;
use crate::trace::Strategy;

/// Retry/timeout policy shared by all remote backends.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            timeout: Duration::from_secs(30),
            backoff: Duration::from_millis(200),
        }
    }
}

/// One endpoint: URL, optional bearer token, and retry policy.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub url: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Endpoint {
            url: url.into(),
            api_key: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

fn build_client(retry: &RetryPolicy) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(retry.timeout)
        .build()
        .map_err(|e| Error::Backend(format!("http client: {e}")))
}

/// POST a JSON body, retrying retriable failures.
fn post_json(
    client: &reqwest::blocking::Client,
    endpoint: &Endpoint,
    body: &serde_json::Value,
) -> Result<serde_json::Value> {
    let attempts = endpoint.retry.max_attempts.max(1);
    let mut last_failure = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(endpoint.retry.backoff * 2u32.pow(attempt - 1));
        }
        let mut request = client.post(&endpoint.url).json(body);
        if let Some(key) = &endpoint.api_key {
            request = request.bearer_auth(key);
        }
        match request.send() {
            Ok(response) => {
                let status = response.status();
                if status.is_success() {
                    return response
                        .json()
                        .map_err(|e| Error::Backend(format!("invalid JSON response: {e}")));
                }
                let text = response.text().unwrap_or_default();
                let retriable = status.as_u16() == 429 || status.is_server_error();
                if !retriable {
                    return Err(Error::Transport {
                        attempts: attempt + 1,
                        msg: format!("{status}: {text}"),
                        retriable: false,
                    });
                }
                last_failure = format!("{status}: {text}");
            }
            Err(e) => {
                last_failure = e.to_string();
            }
        }
    }
    Err(Error::Transport {
        attempts,
        msg: last_failure,
        retriable: true,
    })
}

// --- reranker -------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RerankResponse {
    scores: Vec<f64>,
}

/// Scores chunks with a reranker endpoint:
/// request `{"query", "documents": [..]}`, response `{"scores": [..]}`
/// aligned to the documents. Scores are used raw.
pub struct RemoteReranker {
    endpoint: Endpoint,
    client: reqwest::blocking::Client,
}

impl RemoteReranker {
    pub fn new(endpoint: Endpoint) -> Result<Self> {
        let client = build_client(&endpoint.retry)?;
        Ok(RemoteReranker { endpoint, client })
    }
}

impl Scorer for RemoteReranker {
    fn kind(&self) -> &'static str {
        "remote-reranker"
    }

    fn score(&self, chunk: &Chunk, query: &Query) -> Result<f64> {
        Ok(self.score_batch(&[chunk], query)?[0])
    }

    fn score_batch(&self, chunks: &[&Chunk], query: &Query) -> Result<Vec<f64>> {
        let documents: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let body = json!({ "query": query.text, "documents": documents });
        let value = post_json(&self.client, &self.endpoint, &body)?;
        let parsed: RerankResponse = serde_json::from_value(value)
            .map_err(|e| Error::Backend(format!("reranker response: {e}")))?;
        if parsed.scores.len() != chunks.len() {
            return Err(Error::Backend(format!(
                "reranker returned {} scores for {} documents",
                parsed.scores.len(),
                chunks.len()
            )));
        }
        Ok(parsed.scores)
    }
}

// --- logprobs -------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CompletionLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

/// Conditional NLL through a completions endpoint with echoed prompt
/// logprobs. The prompt is anchor text, a single newline, then source
/// text; only logprobs of tokens starting inside the source span count.
pub struct RemoteLogprob {
    endpoint: Endpoint,
    client: reqwest::blocking::Client,
    pub model: String,
    /// When set, anchors longer than this many whitespace tokens keep only
    /// their tail before being sent.
    pub anchor_token_limit: Option<usize>,
}

impl RemoteLogprob {
    pub fn new(endpoint: Endpoint, model: impl Into<String>) -> Result<Self> {
        let client = build_client(&endpoint.retry)?;
        Ok(RemoteLogprob {
            endpoint,
            client,
            model: model.into(),
            anchor_token_limit: None,
        })
    }

    pub fn with_anchor_token_limit(mut self, limit: Option<usize>) -> Self {
        self.anchor_token_limit = limit;
        self
    }

    fn truncated_anchor(&self, anchor: &str) -> String {
        match self.anchor_token_limit {
            Some(limit) => {
                let tokens: Vec<&str> = anchor.split_whitespace().collect();
                if tokens.len() > limit {
                    tokens[tokens.len() - limit..].join(" ")
                } else {
                    anchor.to_string()
                }
            }
            None => anchor.to_string(),
        }
    }
}

impl NllModel for RemoteLogprob {
    fn kind(&self) -> &'static str {
        "remote-logprob"
    }

    fn token_logprobs(&self, anchor: &str, source: &str) -> Result<Vec<f64>> {
        let anchor = self.truncated_anchor(anchor);
        let prompt = format!("{anchor}\n{source}");
        let source_start = anchor.len() + 1;
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let value = post_json(&self.client, &self.endpoint, &body)?;
        let parsed: CompletionResponse = serde_json::from_value(value)
            .map_err(|e| Error::Backend(format!("completion response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Backend("completion response has no choices".into()))?;
        let logprobs = choice
            .logprobs
            .ok_or_else(|| Error::LogprobAlignment("response carries no logprobs".into()))?;
        if logprobs.text_offset.len() != logprobs.token_logprobs.len() {
            return Err(Error::LogprobAlignment(format!(
                "{} offsets for {} logprobs",
                logprobs.text_offset.len(),
                logprobs.token_logprobs.len()
            )));
        }
        let mut span = Vec::new();
        for (offset, lp) in logprobs.text_offset.iter().zip(&logprobs.token_logprobs) {
            if *offset >= source_start {
                match lp {
                    Some(v) => span.push(*v),
                    None => {
                        return Err(Error::LogprobAlignment(
                            "null logprob inside the source span".into(),
                        ))
                    }
                }
            }
        }
        Ok(span)
    }
}

// --- chat -----------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

fn chat_complete(
    client: &reqwest::blocking::Client,
    endpoint: &Endpoint,
    model: &str,
    prompt: &str,
    temperature: f64,
    seed: Option<u64>,
) -> Result<String> {
    let mut body = json!({
        "model": model,
        "messages": [{ "role": "user", "content": prompt }],
        "temperature": temperature,
    });
    if let Some(seed) = seed {
        body["seed"] = json!(seed);
    }
    let value = post_json(client, endpoint, &body)?;
    let parsed: ChatResponse = serde_json::from_value(value)
        .map_err(|e| Error::Backend(format!("chat response: {e}")))?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| Error::Backend("chat response has no choices".into()))
}

/// Fuses chunk pairs through a chat endpoint with the mode-matching merge
/// prompt. An empty model response falls back to the extractive fuser and
/// flags the trace.
pub struct RemoteChatFuser {
    endpoint: Endpoint,
    client: reqwest::blocking::Client,
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub templates: TemplateSet,
    pub max_in_flight: Option<usize>,
}

impl RemoteChatFuser {
    pub fn new(endpoint: Endpoint, model: impl Into<String>, templates: TemplateSet) -> Result<Self> {
        let client = build_client(&endpoint.retry)?;
        Ok(RemoteChatFuser {
            endpoint,
            client,
            model: model.into(),
            temperature: 0.0,
            seed: None,
            templates,
            max_in_flight: None,
        })
    }
}

impl Fuser for RemoteChatFuser {
    fn kind(&self) -> &'static str {
        "remote-chat"
    }

    fn fuse_text(&self, a: &Chunk, b: &Chunk, query: &Query, mode: Strategy) -> Result<FusedText> {
        let template = self.templates.merge_template(mode);
        let bindings = std::collections::BTreeMap::from([
            ("query", query.text.as_str()),
            ("chunk_a", a.text.as_str()),
            ("chunk_b", b.text.as_str()),
        ]);
        let prompt = render_prompt(template, &bindings)?;
        let content = chat_complete(
            &self.client,
            &self.endpoint,
            &self.model,
            &prompt,
            self.temperature,
            self.seed,
        )?;
        if content.trim().is_empty() {
            log::warn!(
                "model returned an empty fusion for ({}, {}); using the extractive fuser",
                a.id,
                b.id
            );
            return Ok(FusedText {
                text: extractive_merge_text(&a.text, &b.text, &query.text, mode),
                warnings: vec![crate::fusion::WARN_EXTRACTIVE_FALLBACK.to_string()],
            });
        }
        Ok(FusedText::clean(content))
    }

    fn max_in_flight(&self) -> Option<usize> {
        self.max_in_flight
    }
}

/// Generates final answers through the chat endpoint.
pub struct RemoteChatAnswers {
    endpoint: Endpoint,
    client: reqwest::blocking::Client,
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl RemoteChatAnswers {
    pub fn new(endpoint: Endpoint, model: impl Into<String>) -> Result<Self> {
        let client = build_client(&endpoint.retry)?;
        Ok(RemoteChatAnswers {
            endpoint,
            client,
            model: model.into(),
            temperature: 0.0,
            seed: None,
        })
    }
}

impl AnswerGenerator for RemoteChatAnswers {
    fn kind(&self) -> &'static str {
        "remote-chat"
    }

    fn answer(&self, prompt: &str, _query: &Query) -> Result<String> {
        chat_complete(
            &self.client,
            &self.endpoint,
            &self.model,
            prompt,
            self.temperature,
            self.seed,
        )
    }
}
