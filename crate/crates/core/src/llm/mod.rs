//! Provider-agnostic access to the language model that performs the
//! analyze/plan step of each agent's loop.

mod openai;
mod scripted;

pub use openai::{OpenAiCompatible, RetryPolicy, ENV_API_BASE, ENV_API_KEY};
pub use scripted::{ScriptError, ScriptedBackend, ScriptedPolicy};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::AgentId;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |m: &str| Err(LlmError::InvalidRequest(m.to_string()));
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be within [0, 2]");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        match self.messages.first() {
            None => bad("messages must not be empty"),
            Some(m) if m.role != ChatRole::System => bad("first message must be the system prompt"),
            Some(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: Usage,
    pub backend_id: String,
}

/// Who is asking, and in which round. Scripted backends key replies on it;
/// live backends ignore it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallContext {
    pub agent: AgentId,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("malformed provider response: {0}")]
    MalformedProviderResponse(String),
    #[error("provider returned HTTP {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    pub fn is_auth(&self) -> bool {
        matches!(self, LlmError::Auth(_))
    }
}

/// Must tolerate concurrent calls from several agents.
pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, ctx: &CallContext, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

/// `ceil(bytes / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}
