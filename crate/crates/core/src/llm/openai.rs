//! Client for the OpenAI-compatible `/v1/chat/completions` endpoint.

use std::time::Duration;

use log::warn;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{CallContext, ChatMessage, ChatRequest, ChatResponse, LlmBackend, LlmError, Usage};

pub const ENV_API_BASE: &str = "LLM_API_BASE";
pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com";

const ATTEMPT_TIMEOUT: Duration = Duration::from_secs(60);

/// Retries on 429, 5xx and transport failures, sleeping
/// `base_delay * 2^n` before retry `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    messages: &'a [ChatMessage],
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
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Attempt {
    Done(Result<ChatResponse, LlmError>),
    Retry(LlmError),
}

pub struct OpenAiCompatible {
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: Client,
    id: String,
}

impl OpenAiCompatible {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, LlmError> {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        let client = Client::builder()
            .timeout(ATTEMPT_TIMEOUT)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(OpenAiCompatible {
            id: format!("openai-compatible:{base_url}"),
            base_url,
            api_key: api_key.filter(|k| !k.trim().is_empty()),
            retry: RetryPolicy::default(),
            client,
        })
    }

    /// Resolves the endpoint and key: explicit overrides first, then
    /// `LLM_API_BASE` / `LLM_API_KEY`.
    pub fn from_env(base_override: Option<&str>, key_override: Option<String>) -> Result<Self, LlmError> {
        let base = base_override
            .map(str::to_string)
            .or_else(|| std::env::var(ENV_API_BASE).ok())
            .unwrap_or_else(|| DEFAULT_API_BASE.to_string());
        let key = key_override.or_else(|| std::env::var(ENV_API_KEY).ok());
        Self::new(base, key)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn has_credentials(&self) -> bool {
        self.api_key.is_some()
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url)
    }

    fn attempt(&self, key: &str, request: &ChatRequest) -> Attempt {
        let body = WireRequest {
            model: &request.model,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
            messages: &request.messages,
        };
        let resp = match self.client.post(self.endpoint()).bearer_auth(key).json(&body).send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                return Attempt::Retry(LlmError::Transport(e.to_string()))
            }
            Err(e) => return Attempt::Done(Err(LlmError::Transport(e.to_string()))),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(LlmError::Transport(e.to_string())),
        };
        match status {
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                Attempt::Done(Err(LlmError::Auth(format!("HTTP {}", status.as_u16()))))
            }
            StatusCode::TOO_MANY_REQUESTS => Attempt::Retry(LlmError::RateLimited { attempts: 0 }),
            s if s.is_server_error() => {
                Attempt::Retry(LlmError::Provider { status: s.as_u16(), body: text })
            }
            s if !s.is_success() => {
                Attempt::Done(Err(LlmError::Provider { status: s.as_u16(), body: text }))
            }
            _ => Attempt::Done(self.decode(&text)),
        }
    }

    fn decode(&self, text: &str) -> Result<ChatResponse, LlmError> {
        let wire: WireResponse = serde_json::from_str(text)
            .map_err(|e| LlmError::MalformedProviderResponse(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::MalformedProviderResponse("no choices".into()))?;
        let usage = wire
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(ChatResponse {
            content: choice.message.content.unwrap_or_default(),
            usage,
            backend_id: self.id.clone(),
        })
    }
}

impl LlmBackend for OpenAiCompatible {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, _ctx: &CallContext, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| LlmError::Auth(format!("no API key; set {ENV_API_KEY}")))?;
        let attempts = self.retry.max_retries + 1;
        let mut last = LlmError::Transport("no attempt made".into());
        for n in 0..attempts {
            if n > 0 {
                let delay = self.retry.delay_before_retry(n - 1);
                warn!("retrying chat completion in {delay:?} after: {last}");
                std::thread::sleep(delay);
            }
            match self.attempt(key, request) {
                Attempt::Done(result) => return result,
                Attempt::Retry(err) => last = err,
            }
        }
        Err(match last {
            LlmError::RateLimited { .. } => LlmError::RateLimited { attempts },
            other => other,
        })
    }
}
