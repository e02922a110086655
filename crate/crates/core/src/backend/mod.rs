//! Uniform chat-completion interface.
//!
//! Every backend implements [`ChatBackend`]. [`connect`] builds the right
//! implementation from a [`BackendConfig`]; [`complete`] is the one-shot
//! convenience wrapper.

mod http;
mod rate_limit;
mod replay;
mod scripted;
pub mod tokenizer;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use rate_limit::RateLimiter;
pub use replay::ReplayBackend;
pub use scripted::{ExhaustionPolicy, Script, ScriptEntry, ScriptedBackend};
pub use tokenizer::{count_tokens, BpeTokenizer, TokenizerError, TokenizerRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_seed: Option<i64>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_output_tokens: None,
            request_seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| BackendError::InvalidRequest("messages must be non-empty".into()))?;
        if first.role == Role::Assistant {
            return Err(BackendError::InvalidRequest(
                "first message must have role system or user".into(),
            ));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == Some(0) {
            return Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Content of the most recent user message, if any.
    pub fn last_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    /// All message contents joined, used when counting prompt tokens locally.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub reported_usage: Option<Usage>,
    pub backend_id: String,
    pub latency_ms: u64,
}

/// Where a token count came from: the provider's usage report or a local
/// tokenizer. Serialized as `provider` or `local:<tokenizer_id>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TokenSource {
    Provider,
    Local(String),
}

impl fmt::Display for TokenSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenSource::Provider => f.write_str("provider"),
            TokenSource::Local(id) => write!(f, "local:{id}"),
        }
    }
}

impl FromStr for TokenSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "provider" => Ok(TokenSource::Provider),
            _ => s
                .strip_prefix("local:")
                .filter(|id| !id.is_empty())
                .map(|id| TokenSource::Local(id.to_string()))
                .ok_or_else(|| format!("invalid token source `{s}`")),
        }
    }
}

impl Serialize for TokenSource {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenSource {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Completion-token count for a response: provider usage when reported,
/// otherwise a local count of the content.
pub fn completion_tokens(response: &ChatResponse, tokenizer_id: &str) -> Result<(u64, TokenSource), TokenizerError> {
    match response.reported_usage {
        Some(usage) => Ok((usage.completion_tokens, TokenSource::Provider)),
        None => Ok((count_tokens(&response.content, tokenizer_id)? as u64, TokenSource::Local(tokenizer_id.to_string()))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Model identifier sent to the provider; doubles as the label recorded
    /// in traces for offline backends.
    pub model: String,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Script file (scripted) or transcript file (replay).
    #[serde(default)]
    pub source: Option<PathBuf>,
    /// Replay only the turns spoken by this agent.
    #[serde(default)]
    pub replay_agent: Option<String>,
    #[serde(default)]
    pub exhaustion_policy: ExhaustionPolicy,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    #[serde(default)]
    pub default_temperature: f64,
    #[serde(default)]
    pub max_output_tokens: Option<u32>,
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_base_ms() -> u64 {
    500
}

impl BackendConfig {
    fn base(kind: BackendKind, model: impl Into<String>) -> Self {
        Self {
            kind,
            model: model.into(),
            endpoint_url: None,
            api_key_env: None,
            source: None,
            replay_agent: None,
            exhaustion_policy: ExhaustionPolicy::Error,
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            requests_per_minute: None,
            default_temperature: 0.0,
            max_output_tokens: None,
        }
    }

    pub fn http(model: impl Into<String>, endpoint_url: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            endpoint_url: Some(endpoint_url.into()),
            api_key_env: Some(api_key_env.into()),
            ..Self::base(BackendKind::Http, model)
        }
    }

    pub fn scripted(model: impl Into<String>, source: impl Into<PathBuf>) -> Self {
        Self { source: Some(source.into()), ..Self::base(BackendKind::Scripted, model) }
    }

    pub fn replay(model: impl Into<String>, source: impl Into<PathBuf>) -> Self {
        Self { source: Some(source.into()), ..Self::base(BackendKind::Replay, model) }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::Http => {
                if self.endpoint_url.is_none() {
                    return Err(BackendError::InvalidConfig("http backend requires endpoint_url".into()));
                }
                if self.api_key_env.is_none() {
                    return Err(BackendError::InvalidConfig("http backend requires api_key_env".into()));
                }
            }
            BackendKind::Scripted | BackendKind::Replay => {
                if self.source.is_none() {
                    return Err(BackendError::InvalidConfig(format!(
                        "{:?} backend requires a source path",
                        self.kind
                    )));
                }
            }
        }
        if self.backoff_base_ms == 0 {
            return Err(BackendError::InvalidConfig("backoff_base_ms must be positive".into()));
        }
        if self.requests_per_minute == Some(0) {
            return Err(BackendError::InvalidConfig("requests_per_minute must be positive".into()));
        }
        Ok(())
    }

    /// True for backends whose responses are consumed in a fixed order.
    pub fn is_ordinal(&self) -> bool {
        matches!(self.kind, BackendKind::Scripted | BackendKind::Replay)
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingCredential(String),
    #[error("transport failed after {attempts} attempt(s): {last_error}")]
    TransportExhausted { attempts: u32, last_error: String },
    #[error("script exhausted after {consumed} response(s)")]
    ScriptExhausted { consumed: usize },
    #[error("script entry {index} expects the last user message to contain {expected:?}")]
    ScriptMismatch { index: usize, expected: String },
    #[error("malformed provider reply: {0}")]
    MalformedProviderReply(String),
    #[error("provider rejected the request with status {status}: {body}")]
    ProviderRejected { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("cannot read backend source {path}: {reason}")]
    Source { path: PathBuf, reason: String },
}

/// Shared handle to a backend. Backends are `Send + Sync` so one instance can
/// serve concurrent conversations.
pub type SharedBackend = Arc<dyn ChatBackend>;

pub trait ChatBackend: Send + Sync {
    /// Identifier recorded in responses and traces.
    fn id(&self) -> &str;

    /// Model id this backend answers as.
    fn model_id(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Build a backend from its configuration.
pub fn connect(config: &BackendConfig) -> Result<SharedBackend, BackendError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Http => Arc::new(HttpBackend::new(config.clone())?),
        BackendKind::Scripted => {
            let path = config.source.as_ref().expect("validated");
            let script = Script::load(path, config.exhaustion_policy)?;
            Arc::new(ScriptedBackend::new(config.model.clone(), script))
        }
        BackendKind::Replay => {
            let path = config.source.as_ref().expect("validated");
            Arc::new(ReplayBackend::load(config.model.clone(), path, config.replay_agent.as_deref())?)
        }
    })
}

/// One-shot completion through a freshly built backend.
pub fn complete(request: &ChatRequest, config: &BackendConfig) -> Result<ChatResponse, BackendError> {
    connect(config)?.complete(request)
}
