use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use super::{estimate_tokens, CallContext, ChatRequest, ChatResponse, LlmBackend, LlmError, Usage};
use crate::model::AgentId;

pub const SCRIPTED_BACKEND_ID: &str = "scripted";

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid script: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid round key {0:?} in script")]
    RoundKey(String),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReplySpec {
    One(String),
    Many(Vec<String>),
}

/// Replies keyed by `(agent, round)`. Each lookup consumes the next queued
/// reply for that key; once a queue is empty the default reply is used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedPolicy {
    replies: HashMap<(AgentId, u32), VecDeque<String>>,
    default_reply: String,
}

impl Default for ScriptedPolicy {
    fn default() -> Self {
        ScriptedPolicy { replies: HashMap::new(), default_reply: "NOOP".into() }
    }
}

impl ScriptedPolicy {
    pub fn new(default_reply: impl Into<String>) -> Self {
        ScriptedPolicy { replies: HashMap::new(), default_reply: default_reply.into() }
    }

    pub fn default_reply(&self) -> &str {
        &self.default_reply
    }

    pub fn push(&mut self, agent: AgentId, round: u32, reply: impl Into<String>) -> &mut Self {
        self.replies.entry((agent, round)).or_default().push_back(reply.into());
        self
    }

    /// Parses `{"Agent1": {"0": "SET_PRICE 20.00", "4": ["...", "..."]}}`.
    pub fn from_json(json: &str, default_reply: impl Into<String>) -> Result<Self, ScriptError> {
        let raw: BTreeMap<AgentId, BTreeMap<String, ReplySpec>> = serde_json::from_str(json)?;
        let mut policy = ScriptedPolicy::new(default_reply);
        for (agent, rounds) in raw {
            for (key, spec) in rounds {
                let round: u32 = key.parse().map_err(|_| ScriptError::RoundKey(key.clone()))?;
                let replies = match spec {
                    ReplySpec::One(s) => vec![s],
                    ReplySpec::Many(v) => v,
                };
                for r in replies {
                    policy.push(agent.clone(), round, r);
                }
            }
        }
        Ok(policy)
    }

    pub fn load(path: &Path, default_reply: impl Into<String>) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScriptError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text, default_reply)
    }

    pub fn next_reply(&mut self, agent: &AgentId, round: u32) -> String {
        self.replies
            .get_mut(&(agent.clone(), round))
            .and_then(VecDeque::pop_front)
            .unwrap_or_else(|| self.default_reply.clone())
    }
}

/// Deterministic stand-in for a model: replays a [`ScriptedPolicy`].
#[derive(Debug)]
pub struct ScriptedBackend {
    policy: Mutex<ScriptedPolicy>,
    latency: Option<Duration>,
}

impl ScriptedBackend {
    pub fn new(policy: ScriptedPolicy) -> Self {
        ScriptedBackend { policy: Mutex::new(policy), latency: None }
    }

    /// Sleeps for `latency` on every call, to stand in for network time in
    /// benchmarks.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }
}

impl LlmBackend for ScriptedBackend {
    fn id(&self) -> &str {
        SCRIPTED_BACKEND_ID
    }

    fn complete(&self, ctx: &CallContext, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        let content = self
            .policy
            .lock()
            .expect("scripted policy lock poisoned")
            .next_reply(&ctx.agent, ctx.round);
        let prompt_tokens = request.messages.iter().map(|m| estimate_tokens(&m.content)).sum::<usize>();
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: prompt_tokens as u64,
                completion_tokens: estimate_tokens(&content) as u64,
            },
            content,
            backend_id: SCRIPTED_BACKEND_ID.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn id(s: &str) -> AgentId {
        AgentId::new(s).unwrap()
    }

    fn request() -> ChatRequest {
        ChatRequest {
            model: "gpt-4".into(),
            temperature: 0.7,
            messages: vec![ChatMessage::system("sys"), ChatMessage::user("Iteration 5 of 5")],
            max_output_tokens: 256,
        }
    }

    #[test]
    fn replays_the_queued_reply_then_default() {
        let policy = ScriptedPolicy::from_json(
            r#"{"Agent1": {"4": "CONFIRM_SALE Agent4 18.00"}}"#,
            "NOOP",
        )
        .unwrap();
        let backend = ScriptedBackend::new(policy);
        let ctx = CallContext { agent: id("Agent1"), round: 4 };
        let r = backend.complete(&ctx, &request()).unwrap();
        assert_eq!(r.content, "CONFIRM_SALE Agent4 18.00");
        assert_eq!(r.backend_id, "scripted");
        assert_eq!(r.usage.completion_tokens, 7);
        let again = backend.complete(&ctx, &request()).unwrap();
        assert_eq!(again.content, "NOOP");
    }

    #[test]
    fn lists_queue_in_order() {
        let mut p = ScriptedPolicy::from_json(r#"{"A": {"0": ["one", "two"]}}"#, "dflt").unwrap();
        assert_eq!(p.next_reply(&id("A"), 0), "one");
        assert_eq!(p.next_reply(&id("A"), 0), "two");
        assert_eq!(p.next_reply(&id("A"), 0), "dflt");
        assert_eq!(p.next_reply(&id("B"), 3), "dflt");
    }

    #[test]
    fn bad_scripts_are_rejected() {
        assert!(matches!(
            ScriptedPolicy::from_json(r#"{"A": {"first": "x"}}"#, "NOOP"),
            Err(ScriptError::RoundKey(_))
        ));
        assert!(ScriptedPolicy::from_json(r#"{"bad id": {"0": "x"}}"#, "NOOP").is_err());
        assert!(ScriptedPolicy::from_json("[1,2]", "NOOP").is_err());
    }

    #[test]
    fn invalid_requests_fail_before_consuming() {
        let mut p = ScriptedPolicy::default();
        p.push(id("A"), 0, "SET_PRICE 1.00");
        let backend = ScriptedBackend::new(p);
        let mut req = request();
        req.messages.clear();
        let ctx = CallContext { agent: id("A"), round: 0 };
        assert!(backend.complete(&ctx, &req).is_err());
        assert_eq!(backend.complete(&ctx, &request()).unwrap().content, "SET_PRICE 1.00");
    }
}
