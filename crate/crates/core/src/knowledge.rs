//! Per-agent memory: the full interaction history, token-budgeted windows
//! over it for prompts, and end-of-run explanations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::estimate_tokens;
use crate::model::{AgentId, RoundClock};

pub const DEFAULT_HISTORY_BUDGET: usize = 3000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KnowledgeError {
    #[error("entry for round {entry} appended after round {last}")]
    OutOfOrderRound { entry: u32, last: u32 },
    #[error("explanations are only accepted after the last round (at round {current} of {total})")]
    PhaseError { current: u32, total: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Sent,
    Received,
    ActionTaken,
    Observation,
}

impl EntryKind {
    fn label(self) -> &'static str {
        match self {
            EntryKind::Sent => "sent",
            EntryKind::Received => "received",
            EntryKind::ActionTaken => "action",
            EntryKind::Observation => "observed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u32,
    pub kind: EntryKind,
    pub text: String,
    pub tokens: usize,
}

impl HistoryEntry {
    pub fn new(round: u32, kind: EntryKind, text: impl Into<String>) -> Self {
        let text = crate::model::one_line(&text.into());
        let mut entry = HistoryEntry { round, kind, text, tokens: 0 };
        entry.tokens = estimate_tokens(&entry.render());
        entry
    }

    /// The line this entry contributes to a prompt; `tokens` is its estimate.
    pub fn render(&self) -> String {
        format!("[iteration {}] {}: {}", self.round + 1, self.kind.label(), self.text)
    }
}

/// Append-only; never truncated. Only windows drop entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    entries: Vec<HistoryEntry>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, entry: HistoryEntry) -> Result<(), KnowledgeError> {
        if let Some(last) = self.entries.last() {
            if entry.round < last.round {
                return Err(KnowledgeError::OutOfOrderRound { entry: entry.round, last: last.round });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.tokens).sum()
    }

    /// Longest suffix whose token sum fits in `budget`.
    pub fn window(&self, budget: usize) -> KnowledgeWindow {
        KnowledgeWindow::from_slice(&self.entries, budget)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeWindow {
    pub entries: Vec<HistoryEntry>,
    pub budget: usize,
}

impl KnowledgeWindow {
    pub fn from_slice(entries: &[HistoryEntry], budget: usize) -> Self {
        let mut used = 0usize;
        let mut start = entries.len();
        for (i, e) in entries.iter().enumerate().rev() {
            if used + e.tokens > budget {
                break;
            }
            used += e.tokens;
            start = i;
        }
        KnowledgeWindow { entries: entries[start..].to_vec(), budget }
    }

    pub fn tokens(&self) -> usize {
        self.entries.iter().map(|e| e.tokens).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops the oldest entry.
    pub fn shrink(&mut self) -> bool {
        if self.entries.is_empty() {
            false
        } else {
            self.entries.remove(0);
            true
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(HistoryEntry::render).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub agent: AgentId,
    pub text: String,
    pub empty: bool,
}

/// End-of-run explanations, keyed by agent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Explanations {
    by_agent: BTreeMap<AgentId, Explanation>,
}

impl Explanations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        agent: &AgentId,
        text: &str,
        clock: &RoundClock,
    ) -> Result<&Explanation, KnowledgeError> {
        if !clock.in_explanation_phase() {
            return Err(KnowledgeError::PhaseError { current: clock.current(), total: clock.total() });
        }
        let explanation = Explanation {
            agent: agent.clone(),
            text: text.to_string(),
            empty: text.trim().is_empty(),
        };
        self.by_agent.insert(agent.clone(), explanation);
        Ok(&self.by_agent[agent])
    }

    pub fn get(&self, agent: &AgentId) -> Option<&Explanation> {
        self.by_agent.get(agent)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Explanation> {
        self.by_agent.values()
    }

    pub fn len(&self) -> usize {
        self.by_agent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_agent.is_empty()
    }
}
