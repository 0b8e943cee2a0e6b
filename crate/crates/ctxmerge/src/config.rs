//! Application configuration: endpoints, auth indirection, tokenizer and
//! engine defaults, template overrides, and retry policy. Loadable from a
//! single JSON file with `${ENV_VAR}` interpolation; secrets only ever
//! come from the environment.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{PromptTemplate, TemplateName, TemplateSet};
use crate::remote::{Endpoint, RetryPolicy};

pub const API_KEY_ENV: &str = "CTXMERGE_API_KEY";
pub const BASE_URL_ENV: &str = "CTXMERGE_BASE_URL";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EngineDefaults {
    pub strategy: String,
    pub schedule: String,
    pub multiplier: f64,
    pub concurrency: usize,
}

impl Default for EngineDefaults {
    fn default() -> Self {
        EngineDefaults {
            strategy: "symmetric".into(),
            schedule: "hierarchical".into(),
            multiplier: 5.0,
            concurrency: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct TemplatePaths {
    pub symmetric: Option<PathBuf>,
    pub asymmetric: Option<PathBuf>,
    pub generation: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RetrySettings {
    pub max_attempts: u32,
    pub timeout_ms: u64,
    pub backoff_ms: u64,
}

impl Default for RetrySettings {
    fn default() -> Self {
        RetrySettings {
            max_attempts: 3,
            timeout_ms: 30_000,
            backoff_ms: 200,
        }
    }
}

impl RetrySettings {
    pub fn policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            timeout: Duration::from_millis(self.timeout_ms),
            backoff: Duration::from_millis(self.backoff_ms),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AppConfig {
    /// Base URL for OpenAI-compatible endpoints; `${VARS}` interpolated.
    /// Falls back to the `CTXMERGE_BASE_URL` environment variable.
    pub base_url: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    /// Per-service URL overrides.
    pub rerank_url: Option<String>,
    pub chat_url: Option<String>,
    pub logprob_url: Option<String>,
    pub chat_model: String,
    pub logprob_model: String,
    pub tokenizer: String,
    pub defaults: EngineDefaults,
    pub templates: TemplatePaths,
    pub retry: RetrySettings,
    /// Anchor tail kept when it exceeds the backend context, in tokens.
    pub anchor_token_limit: Option<usize>,
    /// Sampling seed passed to endpoints that support one.
    pub seed: Option<u64>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            base_url: None,
            api_key_env: API_KEY_ENV.into(),
            rerank_url: None,
            chat_url: None,
            logprob_url: None,
            chat_model: "default".into(),
            logprob_model: "default".into(),
            tokenizer: "whitespace".into(),
            defaults: EngineDefaults::default(),
            templates: TemplatePaths::default(),
            retry: RetrySettings::default(),
            anchor_token_limit: None,
            seed: None,
        }
    }
}

fn interpolate(value: &str) -> Result<String> {
    let mut out = String::with_capacity(value.len());
    let mut rest = value;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 2..];
        let end = tail
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated ${{ in {value:?}")))?;
        let var = &tail[..end];
        let resolved = std::env::var(var)
            .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
        out.push_str(&resolved);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut config: AppConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for field in [
            &mut config.base_url,
            &mut config.rerank_url,
            &mut config.chat_url,
            &mut config.logprob_url,
        ] {
            if let Some(value) = field {
                *value = interpolate(value)?;
            }
        }
        Ok(config)
    }

    /// SHA-256 of the resolved configuration; logged once per run so runs
    /// are attributable to an exact configuration. Secrets never enter the
    /// hash because the config only names the env var.
    pub fn resolved_hash(&self) -> String {
        let serialized = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(serialized.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env).ok()
    }

    fn base_url(&self) -> Result<String> {
        if let Some(url) = &self.base_url {
            return Ok(url.trim_end_matches('/').to_string());
        }
        std::env::var(BASE_URL_ENV)
            .map(|u| u.trim_end_matches('/').to_string())
            .map_err(|_| {
                Error::Config(format!(
                    "no base_url configured and {BASE_URL_ENV} is not set"
                ))
            })
    }

    pub fn rerank_endpoint(&self) -> Result<Endpoint> {
        let url = match &self.rerank_url {
            Some(url) => url.clone(),
            None => format!("{}/rerank", self.base_url()?),
        };
        Ok(Endpoint::new(url)
            .with_api_key(self.api_key())
            .with_retry(self.retry.policy()))
    }

    pub fn chat_endpoint(&self) -> Result<Endpoint> {
        let url = match &self.chat_url {
            Some(url) => url.clone(),
            None => format!("{}/v1/chat/completions", self.base_url()?),
        };
        Ok(Endpoint::new(url)
            .with_api_key(self.api_key())
            .with_retry(self.retry.policy()))
    }

    pub fn logprob_endpoint(&self) -> Result<Endpoint> {
        let url = match &self.logprob_url {
            Some(url) => url.clone(),
            None => format!("{}/v1/completions", self.base_url()?),
        };
        Ok(Endpoint::new(url)
            .with_api_key(self.api_key())
            .with_retry(self.retry.policy()))
    }

    /// Built-in templates with any configured file overrides applied.
    pub fn template_set(&self) -> Result<TemplateSet> {
        let mut set = TemplateSet::default();
        if let Some(path) = &self.templates.symmetric {
            set.symmetric = PromptTemplate::from_file(TemplateName::SymmetricMerge, path)?;
        }
        if let Some(path) = &self.templates.asymmetric {
            set.asymmetric = PromptTemplate::from_file(TemplateName::AsymmetricMerge, path)?;
        }
        if let Some(path) = &self.templates.generation {
            set.generation = PromptTemplate::from_file(TemplateName::AnswerGeneration, path)?;
        }
        Ok(set)
    }
}
