//! JSONL transcript records. One JSON object per line, tagged by
//! `record_type`; every record carries `run_id`, `round` and `agent`.
//! Field order within a record is fixed by these definitions.

use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use super::report::Report;
use crate::llm::Usage;
use crate::mapek::{CycleEvent, CycleRecord, Prompt, Reply};
use crate::marketplace::{self_message_anomaly, AnomalyEvent, AnomalyKind};
use crate::model::{ActionCommand, AgentId, Amount, Message, Performative};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptView {
    pub system: String,
    pub user: String,
    pub tokens: usize,
    pub history_entries: usize,
    pub history_tokens: usize,
}

impl From<&Prompt> for PromptView {
    fn from(p: &Prompt) -> Self {
        PromptView {
            system: p.system.clone(),
            user: p.user.clone(),
            tokens: p.tokens,
            history_entries: p.history_entries,
            history_tokens: p.history_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseView {
    pub content: String,
    pub usage: Usage,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionView {
    pub command: String,
    pub verb: String,
    pub rationale: Option<String>,
    pub raw: String,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageStatus {
    Accepted,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionOutcome {
    Applied,
    Anomaly,
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record_type", rename_all = "snake_case")]
pub enum TranscriptRecord {
    Config {
        run_id: String,
        round: u32,
        agent: Option<AgentId>,
        config: SimConfig,
    },
    Cycle {
        run_id: String,
        round: u32,
        agent: AgentId,
        inbox: Vec<Message>,
        prompt: Option<PromptView>,
        response: Option<ResponseView>,
        error: Option<String>,
        auth_failure: bool,
        backend_calls: u32,
        action: ActionView,
    },
    Action {
        run_id: String,
        round: u32,
        agent: AgentId,
        command: String,
        outcome: ActionOutcome,
    },
    Message {
        run_id: String,
        round: u32,
        agent: AgentId,
        status: MessageStatus,
        sender: AgentId,
        receiver: AgentId,
        performative: Performative,
        body: String,
        seq: u64,
        deliver_round: Option<u32>,
        self_addressed: bool,
        reason: Option<String>,
    },
    Settlement {
        run_id: String,
        round: u32,
        agent: AgentId,
        seller: AgentId,
        buyer: AgentId,
        price: Amount,
    },
    Anomaly {
        run_id: String,
        round: u32,
        agent: AgentId,
        kind: AnomalyKind,
        detail: String,
    },
    Explanation {
        run_id: String,
        round: u32,
        agent: AgentId,
        inbox: Vec<Message>,
        prompt: Option<PromptView>,
        response: Option<ResponseView>,
        error: Option<String>,
        auth_failure: bool,
        text: String,
        empty: bool,
    },
    Report {
        run_id: String,
        round: u32,
        agent: Option<AgentId>,
        report: Report,
    },
}

impl TranscriptRecord {
    pub fn round(&self) -> u32 {
        match self {
            TranscriptRecord::Config { round, .. }
            | TranscriptRecord::Cycle { round, .. }
            | TranscriptRecord::Action { round, .. }
            | TranscriptRecord::Message { round, .. }
            | TranscriptRecord::Settlement { round, .. }
            | TranscriptRecord::Anomaly { round, .. }
            | TranscriptRecord::Explanation { round, .. }
            | TranscriptRecord::Report { round, .. } => *round,
        }
    }

    pub fn record_type(&self) -> &'static str {
        match self {
            TranscriptRecord::Config { .. } => "config",
            TranscriptRecord::Cycle { .. } => "cycle",
            TranscriptRecord::Action { .. } => "action",
            TranscriptRecord::Message { .. } => "message",
            TranscriptRecord::Settlement { .. } => "settlement",
            TranscriptRecord::Anomaly { .. } => "anomaly",
            TranscriptRecord::Explanation { .. } => "explanation",
            TranscriptRecord::Report { .. } => "report",
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("transcript records serialize")
    }

    /// The message a `message` record describes.
    pub fn as_message(&self) -> Option<(Message, MessageStatus)> {
        match self {
            TranscriptRecord::Message { round, sender, receiver, performative, body, seq, status, .. } => Some((
                Message {
                    sender: sender.clone(),
                    receiver: receiver.clone(),
                    performative: *performative,
                    body: body.clone(),
                    round_sent: *round,
                    seq: *seq,
                },
                *status,
            )),
            _ => None,
        }
    }
}

pub(crate) fn reply_views(reply: &Reply) -> (Option<ResponseView>, Option<String>, bool) {
    match reply {
        Reply::Response(r) => (
            Some(ResponseView { content: r.content.clone(), usage: r.usage, backend_id: r.backend_id.clone() }),
            None,
            false,
        ),
        Reply::Failed(e) => (None, Some(e.to_string()), e.is_auth()),
        Reply::Skipped(e) => (None, Some(e.to_string()), false),
    }
}

pub(crate) fn message_record(run_id: &str, message: &Message, status: MessageStatus, reason: Option<String>) -> TranscriptRecord {
    TranscriptRecord::Message {
        run_id: run_id.to_string(),
        round: message.round_sent,
        agent: message.sender.clone(),
        status,
        sender: message.sender.clone(),
        receiver: message.receiver.clone(),
        performative: message.performative,
        body: message.body.clone(),
        seq: message.seq,
        deliver_round: (status == MessageStatus::Accepted).then_some(message.round_sent + 1),
        self_addressed: message.is_self_addressed(),
        reason,
    }
}

pub(crate) fn anomaly_record(run_id: &str, a: &AnomalyEvent) -> TranscriptRecord {
    TranscriptRecord::Anomaly {
        run_id: run_id.to_string(),
        round: a.round,
        agent: a.agent.clone(),
        kind: a.kind,
        detail: a.detail.clone(),
    }
}

pub(crate) fn outcome_of(command: &ActionCommand, events: &[CycleEvent]) -> ActionOutcome {
    if events.iter().any(|e| matches!(e, CycleEvent::Anomaly(_))) {
        ActionOutcome::Anomaly
    } else if command.is_noop() {
        ActionOutcome::Noop
    } else {
        ActionOutcome::Applied
    }
}

/// Records for one executed cycle, in transcript order: the cycle, the
/// applied action, then each effect.
pub(crate) fn cycle_records(run_id: &str, cycle: &CycleRecord) -> Vec<TranscriptRecord> {
    let (response, error, auth_failure) = reply_views(&cycle.reply);
    let mut out = vec![
        TranscriptRecord::Cycle {
            run_id: run_id.to_string(),
            round: cycle.round,
            agent: cycle.agent.clone(),
            inbox: cycle.inbox.clone(),
            prompt: cycle.prompt.as_ref().map(PromptView::from),
            response,
            error,
            auth_failure,
            backend_calls: cycle.backend_calls(),
            action: ActionView {
                command: cycle.command.action.to_string(),
                verb: cycle.command.action.verb().to_string(),
                rationale: cycle.command.rationale.clone(),
                raw: cycle.command.raw.clone(),
                diagnostic: cycle.command.diagnostic.clone(),
            },
        },
        TranscriptRecord::Action {
            run_id: run_id.to_string(),
            round: cycle.round,
            agent: cycle.agent.clone(),
            command: cycle.command.action.to_string(),
            outcome: outcome_of(&cycle.command, &cycle.events),
        },
    ];
    out.extend(event_records(run_id, &cycle.events));
    out
}

/// Records for the effects of one applied command.
pub(crate) fn event_records(run_id: &str, events: &[CycleEvent]) -> Vec<TranscriptRecord> {
    let mut out = Vec::new();
    for e in events {
        match e {
            CycleEvent::MessageAccepted { message, self_addressed } => {
                out.push(message_record(run_id, message, MessageStatus::Accepted, None));
                if *self_addressed {
                    out.push(anomaly_record(run_id, &self_message_anomaly(message)));
                }
            }
            CycleEvent::MessageDropped { message, reason } => {
                out.push(message_record(run_id, message, MessageStatus::Dropped, Some(reason.clone())));
            }
            CycleEvent::Settled(s) => out.push(TranscriptRecord::Settlement {
                run_id: run_id.to_string(),
                round: s.round,
                agent: s.seller.clone(),
                seller: s.seller.clone(),
                buyer: s.buyer.clone(),
                price: s.price,
            }),
            CycleEvent::Anomaly(a) => out.push(anomaly_record(run_id, a)),
            CycleEvent::PriceListed { .. } | CycleEvent::OfferRecorded { .. } => {}
        }
    }
    out
}

/// Parses a JSONL transcript.
pub fn parse_transcript(text: &str) -> Result<Vec<TranscriptRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
