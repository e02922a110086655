use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{BackendConfig, BackendError, ChatBackend, ChatMessage, ChatRequest, ChatResponse, RateLimiter, Usage};

/// OpenAI-style chat-completions client with retry and an optional shared
/// rate-limit gate.
#[derive(Debug)]
pub struct HttpBackend {
    id: String,
    config: BackendConfig,
    client: reqwest::blocking::Client,
    limiter: Option<RateLimiter>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

enum Attempt {
    Done(ChatResponse),
    Transient(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        let limiter = config.requests_per_minute.map(RateLimiter::per_minute);
        Ok(Self { id: format!("http:{}", config.model), config, client, limiter })
    }

    fn api_key(&self) -> Result<String, BackendError> {
        let var = self.config.api_key_env.as_deref().expect("validated");
        std::env::var(var).map_err(|_| BackendError::MissingCredential(var.to_string()))
    }

    fn attempt(&self, body: &WireRequest<'_>, key: &str) -> Attempt {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let url = self.config.endpoint_url.as_deref().expect("validated");
        let started = Instant::now();
        let reply = match self.client.post(url).bearer_auth(key).json(body).send() {
            Ok(reply) => reply,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = reply.status();
        let text = match reply.text() {
            Ok(text) => text,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Transient(format!("status {status}"));
        }
        if !status.is_success() {
            return Attempt::Fatal(BackendError::ProviderRejected { status: status.as_u16(), body: text });
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(parsed) => parsed,
            Err(e) => return Attempt::Fatal(BackendError::MalformedProviderReply(e.to_string())),
        };
        let Some(content) = parsed.choices.into_iter().next().and_then(|c| c.message.content) else {
            return Attempt::Fatal(BackendError::MalformedProviderReply(
                "missing choices[0].message.content".into(),
            ));
        };
        Attempt::Done(ChatResponse {
            content,
            reported_usage: parsed.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
            backend_id: self.id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let key = self.api_key()?;
        let body = WireRequest {
            model: &request.model_id,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens.or(self.config.max_output_tokens),
            seed: request.request_seed,
        };
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let factor = 1u64 << (attempt - 1).min(16);
                std::thread::sleep(Duration::from_millis(self.config.backoff_base_ms.saturating_mul(factor)));
            }
            match self.attempt(&body, &key) {
                Attempt::Done(response) => return Ok(response),
                Attempt::Fatal(err) => return Err(err),
                Attempt::Transient(err) => last_error = err,
            }
        }
        Err(BackendError::TransportExhausted { attempts: self.config.max_retries + 1, last_error })
    }
}
