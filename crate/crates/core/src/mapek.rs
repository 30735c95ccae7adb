//! The per-agent control loop. Monitor compiles the round's percepts into a
//! single prompt, one model call stands in for analyze/plan/knowledge, and
//! Execute turns the reply into a command applied to the managed element.
//!
//! A cycle is split in two halves so a driver can run the first half for
//! all agents concurrently: [`plan_cycle`] only reads shared state, while
//! [`execute`] mutates the environment and must run at the round barrier in
//! a fixed agent order.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::knowledge::{EntryKind, History, HistoryEntry, KnowledgeWindow};
use crate::llm::{
    estimate_tokens, CallContext, ChatMessage, ChatRequest, ChatResponse, LlmBackend, LlmError,
};
use crate::marketplace::{AnomalyEvent, Settlement};
use crate::messaging::DirectoryEntry;
use crate::model::{parse_action, ActionCommand, AgentId, Amount, Message, Role, RoundClock, GRAMMAR_INSTRUCTIONS};

pub const DEFAULT_CONTEXT_BUDGET: usize = 6000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoopError {
    #[error("prompt needs {needed} tokens even with no history, context budget is {budget}")]
    BudgetUnsatisfiable { needed: usize, budget: usize },
}

pub const SELLER_TEMPLATE: &str = "\
You are {agent}, an autonomous seller agent in an online book marketplace.
Every seller has unlimited identical copies of the same book and is free to choose its own price.
Each buyer wants a single copy and is looking for the lowest price it can get.
Your goal is to earn as much money as possible from book sales before the simulation ends.
You can only act through the commands described in each message. Keep acting as {agent} throughout.";

pub const BUYER_TEMPLATE: &str = "\
You are {agent}, an autonomous buyer agent in an online book marketplace.
Several sellers offer identical copies of the same book, each at its own price.
Your goal is to buy exactly one copy at the lowest price you can before the simulation ends.
You can only act through the commands described in each message. Keep acting as {agent} throughout.";

/// Built-in role template text for a template id, if one exists.
pub fn builtin_template(id: &str) -> Option<&'static str> {
    match id {
        "seller" => Some(SELLER_TEMPLATE),
        "buyer" => Some(BUYER_TEMPLATE),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub history_budget: usize,
    pub context_budget: usize,
}

pub struct AgentRuntime {
    pub id: AgentId,
    pub role: Role,
    /// Role template with the agent name filled in. Never stored in history.
    pub system_prompt: String,
    pub history: History,
    pub backend: Arc<dyn LlmBackend>,
    pub config: AgentConfig,
}

impl AgentRuntime {
    pub fn new(
        id: AgentId,
        role: Role,
        template: &str,
        backend: Arc<dyn LlmBackend>,
        config: AgentConfig,
    ) -> Self {
        let system_prompt = template.replace("{agent}", id.as_str());
        AgentRuntime { id, role, system_prompt, history: History::new(), backend, config }
    }
}

/// What the agent senses at the start of a cycle.
#[derive(Debug, Clone, Default)]
pub struct Percepts {
    pub inbox: Vec<Message>,
    pub directory: Vec<DirectoryEntry>,
    pub own_state: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
    /// Estimated tokens of system plus user text.
    pub tokens: usize,
    pub history_entries: usize,
    pub history_tokens: usize,
}

impl Prompt {
    fn build(system: &str, user: String, window: &KnowledgeWindow) -> Self {
        Prompt {
            tokens: estimate_tokens(system) + estimate_tokens(&user),
            system: system.to_string(),
            user,
            history_entries: window.entries.len(),
            history_tokens: window.tokens(),
        }
    }
}

pub fn render_directory(directory: &[DirectoryEntry]) -> String {
    if directory.is_empty() {
        return "(empty)".into();
    }
    directory
        .iter()
        .map(|e| match (e.role, e.listed_price) {
            (Role::Seller, Some(p)) => format!("- {} (seller): {p}", e.agent),
            (Role::Seller, None) => format!("- {} (seller): no price listed", e.agent),
            (Role::Buyer, _) => format!("- {} (buyer)", e.agent),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// The line an inbox message occupies in a prompt.
pub fn render_inbox_line(m: &Message) -> String {
    format!("- From {} [{}]: {}", m.sender, m.performative, crate::model::one_line(&m.body))
}

fn render_inbox(inbox: &[Message]) -> String {
    if inbox.is_empty() {
        "(none)".into()
    } else {
        inbox.iter().map(render_inbox_line).collect::<Vec<_>>().join("\n")
    }
}

fn render_memory(window: &KnowledgeWindow) -> String {
    if window.is_empty() {
        "(nothing yet)".into()
    } else {
        window.render()
    }
}

fn round_user_text(percepts: &Percepts, window: &KnowledgeWindow, clock: &RoundClock) -> String {
    let mut banner = clock.banner();
    if clock.is_final_round() {
        banner.push_str("\nThis is the final iteration; the simulation ends after it.");
    }
    format!(
        "{banner}\n\n## Your state\n{}\n\n## Marketplace directory\n{}\n\n## Your memory\n{}\n\n## Messages received\n{}\n\n## Your reply\n{GRAMMAR_INSTRUCTIONS}",
        percepts.own_state,
        render_directory(&percepts.directory),
        render_memory(window),
        render_inbox(&percepts.inbox),
    )
}

fn explanation_user_text(percepts: &Percepts, window: &KnowledgeWindow, clock: &RoundClock) -> String {
    format!(
        "The simulation has ended after {} iterations.\n\n## Your state\n{}\n\n## Your memory\n{}\n\n## Messages received\n{}\n\n## Your reply\nExplain the decisions you made during the simulation and the reasons behind them.",
        clock.total(),
        percepts.own_state,
        render_memory(window),
        render_inbox(&percepts.inbox),
    )
}

// Largest history suffix that keeps the whole prompt inside the context
// budget. History shrinks before anything else is dropped.
fn fit_prompt(
    runtime: &AgentRuntime,
    mut render: impl FnMut(&KnowledgeWindow) -> String,
) -> Result<Prompt, LoopError> {
    let budget = runtime.config.context_budget;
    let mut window = runtime.history.window(runtime.config.history_budget);
    loop {
        let prompt = Prompt::build(&runtime.system_prompt, render(&window), &window);
        if prompt.tokens <= budget {
            return Ok(prompt);
        }
        if !window.shrink() {
            return Err(LoopError::BudgetUnsatisfiable { needed: prompt.tokens, budget });
        }
    }
}

/// Monitor: percepts, memory and the round banner compiled into one prompt.
pub fn monitor(runtime: &AgentRuntime, percepts: &Percepts, clock: &RoundClock) -> Result<Prompt, LoopError> {
    debug_assert!(clock.current() < clock.total());
    fit_prompt(runtime, |w| round_user_text(percepts, w, clock))
}

/// The post-run prompt asking an agent to account for its decisions.
pub fn explanation_prompt(
    runtime: &AgentRuntime,
    percepts: &Percepts,
    clock: &RoundClock,
) -> Result<Prompt, LoopError> {
    fit_prompt(runtime, |w| explanation_user_text(percepts, w, clock))
}

/// The analyze/plan step: exactly one backend call.
pub fn reason(runtime: &AgentRuntime, prompt: &Prompt, clock: &RoundClock) -> Result<ChatResponse, LlmError> {
    let request = ChatRequest {
        model: runtime.config.model.clone(),
        temperature: runtime.config.temperature,
        messages: vec![ChatMessage::system(&prompt.system), ChatMessage::user(&prompt.user)],
        max_output_tokens: runtime.config.max_output_tokens,
    };
    let ctx = CallContext { agent: runtime.id.clone(), round: clock.current() };
    runtime.backend.complete(&ctx, &request)
}

/// The model's reply as recorded: either content or the error it failed with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Response(ChatResponse),
    Failed(LlmError),
    /// The prompt could not be fit; no call was made.
    Skipped(LoopError),
}

impl Reply {
    pub fn content(&self) -> &str {
        match self {
            Reply::Response(r) => &r.content,
            _ => "",
        }
    }

    pub fn is_auth_failure(&self) -> bool {
        matches!(self, Reply::Failed(e) if e.is_auth())
    }
}

/// The first half of a cycle: everything up to a parsed command.
#[derive(Debug, Clone)]
pub struct PlannedCycle {
    pub agent: AgentId,
    pub round: u32,
    pub percepts: Percepts,
    pub prompt: Option<Prompt>,
    pub reply: Reply,
    pub command: ActionCommand,
}

/// Monitor, reason and parse. Reads only the runtime and its percepts.
pub fn plan_cycle(runtime: &AgentRuntime, percepts: Percepts, clock: &RoundClock) -> PlannedCycle {
    let (prompt, reply) = match monitor(runtime, &percepts, clock) {
        Ok(prompt) => {
            let reply = match reason(runtime, &prompt, clock) {
                Ok(r) => Reply::Response(r),
                Err(e) => Reply::Failed(e),
            };
            (Some(prompt), reply)
        }
        Err(e) => (None, Reply::Skipped(e)),
    };
    let command = match &reply {
        Reply::Response(r) => parse_action(&r.content),
        Reply::Failed(e) => ActionCommand::noop("", format!("backend error: {e}")),
        Reply::Skipped(e) => ActionCommand::noop("", format!("cycle aborted: {e}")),
    };
    PlannedCycle { agent: runtime.id.clone(), round: clock.current(), percepts, prompt, reply, command }
}

/// Something that happened to the managed element because of a command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CycleEvent {
    MessageAccepted { message: Message, self_addressed: bool },
    MessageDropped { message: Message, reason: String },
    PriceListed { seller: AgentId, price: Amount },
    OfferRecorded { buyer: AgentId, seller: AgentId, amount: Amount },
    Settled(Settlement),
    Anomaly(AnomalyEvent),
}

/// The part of the world an agent senses and acts on.
pub trait Environment {
    fn percepts(&mut self, agent: &AgentId, clock: &RoundClock) -> Percepts;

    fn apply(&mut self, agent: &AgentId, command: &ActionCommand, clock: &RoundClock) -> Vec<CycleEvent>;
}

#[derive(Debug, Clone)]
pub struct CycleRecord {
    pub agent: AgentId,
    pub round: u32,
    pub inbox: Vec<Message>,
    pub prompt: Option<Prompt>,
    pub reply: Reply,
    pub command: ActionCommand,
    pub events: Vec<CycleEvent>,
}

impl CycleRecord {
    pub fn backend_calls(&self) -> u32 {
        u32::from(!matches!(self.reply, Reply::Skipped(_)))
    }
}

fn outcome_summary(command: &ActionCommand, events: &[CycleEvent]) -> String {
    let mut parts = Vec::new();
    for e in events {
        match e {
            CycleEvent::Settled(s) => parts.push(format!("sale settled: {} -> {} at {}", s.seller, s.buyer, s.price)),
            CycleEvent::Anomaly(a) => parts.push(format!("rejected: {}", a.detail)),
            CycleEvent::MessageDropped { message, reason } => {
                parts.push(format!("message to {} dropped ({reason})", message.receiver))
            }
            CycleEvent::PriceListed { price, .. } => parts.push(format!("price listed at {price}")),
            _ => {}
        }
    }
    if let Some(d) = &command.diagnostic {
        parts.push(format!("no action ({d})"));
    }
    if parts.is_empty() {
        command.action.to_string()
    } else {
        format!("{} ({})", command.action, parts.join("; "))
    }
}

/// Execute: applies the command, then records the cycle in the agent's
/// history. The action entry is appended last so it is always the newest.
pub fn execute(runtime: &mut AgentRuntime, planned: PlannedCycle, env: &mut impl Environment, clock: &RoundClock) -> CycleRecord {
    let events = env.apply(&runtime.id, &planned.command, clock);
    let round = clock.current();
    let directory_line = planned
        .percepts
        .directory
        .iter()
        .filter(|e| e.role == Role::Seller)
        .map(|e| match e.listed_price {
            Some(p) => format!("{} {p}", e.agent),
            None => format!("{} unlisted", e.agent),
        })
        .collect::<Vec<_>>()
        .join(", ");
    let mut entries = vec![HistoryEntry::new(round, EntryKind::Observation, format!("seller prices: {directory_line}"))];
    entries.extend(planned.percepts.inbox.iter().map(|m| {
        HistoryEntry::new(round, EntryKind::Received, format!("from {} [{}]: {}", m.sender, m.performative, m.body))
    }));
    entries.extend(events.iter().filter_map(|e| match e {
        CycleEvent::MessageAccepted { message, .. } => Some(HistoryEntry::new(
            round,
            EntryKind::Sent,
            format!("to {} [{}]: {}", message.receiver, message.performative, message.body),
        )),
        _ => None,
    }));
    entries.push(HistoryEntry::new(round, EntryKind::ActionTaken, outcome_summary(&planned.command, &events)));
    for e in entries {
        runtime.history.append(e).expect("cycles run in round order");
    }
    CycleRecord {
        agent: planned.agent,
        round,
        inbox: planned.percepts.inbox,
        prompt: planned.prompt,
        reply: planned.reply,
        command: planned.command,
        events,
    }
}

/// One full cycle: sense, monitor, reason, execute.
pub fn step(runtime: &mut AgentRuntime, env: &mut impl Environment, clock: &RoundClock) -> CycleRecord {
    let percepts = env.percepts(&runtime.id, clock);
    let planned = plan_cycle(runtime, percepts, clock);
    execute(runtime, planned, env, clock)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptedBackend, ScriptedPolicy};
    use crate::model::{Action, Performative};

    fn id(s: &str) -> AgentId {
        AgentId::new(s).unwrap()
    }

    fn config() -> AgentConfig {
        AgentConfig {
            model: "gpt-4".into(),
            temperature: 0.7,
            max_output_tokens: 256,
            history_budget: 3000,
            context_budget: DEFAULT_CONTEXT_BUDGET,
        }
    }

    fn runtime(agent: &str, role: Role, policy: ScriptedPolicy) -> AgentRuntime {
        let template = if role == Role::Seller { SELLER_TEMPLATE } else { BUYER_TEMPLATE };
        AgentRuntime::new(id(agent), role, template, Arc::new(ScriptedBackend::new(policy)), config())
    }

    fn msg(sender: &str, body: &str, seq: u64) -> Message {
        Message {
            sender: id(sender),
            receiver: id("Agent1"),
            performative: Performative::Propose,
            body: body.into(),
            round_sent: 2,
            seq,
        }
    }

    struct FailingBackend;

    impl LlmBackend for FailingBackend {
        fn id(&self) -> &str {
            "failing"
        }
        fn complete(&self, _: &CallContext, _: &ChatRequest) -> Result<ChatResponse, LlmError> {
            Err(LlmError::Auth("rejected".into()))
        }
    }

    /// Records what was applied; every command becomes one accepted message.
    #[derive(Default)]
    struct Recorder {
        applied: Vec<(AgentId, Action)>,
        inbox: Vec<Message>,
    }

    impl Environment for Recorder {
        fn percepts(&mut self, _: &AgentId, _: &RoundClock) -> Percepts {
            Percepts { inbox: std::mem::take(&mut self.inbox), directory: vec![], own_state: "state".into() }
        }

        fn apply(&mut self, agent: &AgentId, command: &ActionCommand, clock: &RoundClock) -> Vec<CycleEvent> {
            self.applied.push((agent.clone(), command.action.clone()));
            match &command.action {
                Action::Offer { receiver, amount } => vec![CycleEvent::MessageAccepted {
                    message: Message {
                        sender: agent.clone(),
                        receiver: receiver.clone(),
                        performative: Performative::Propose,
                        body: format!("OFFER {amount}"),
                        round_sent: clock.current(),
                        seq: 0,
                    },
                    self_addressed: false,
                }],
                _ => vec![],
            }
        }
    }

    #[test]
    fn inbox_is_concatenated_in_delivery_order() {
        let rt = runtime("Agent1", Role::Seller, ScriptedPolicy::default());
        let percepts = Percepts {
            inbox: vec![msg("Agent4", "OFFER 18.00", 0), msg("Agent5", "OFFER 25.00", 0)],
            directory: vec![],
            own_state: "no sales yet".into(),
        };
        let p = monitor(&rt, &percepts, &RoundClock::new(3, 5).unwrap()).unwrap();
        let first = p.user.find("- From Agent4 [propose]: OFFER 18.00").unwrap();
        let second = p.user.find("- From Agent5 [propose]: OFFER 25.00").unwrap();
        assert!(first < second);
        assert_eq!(p.user.matches("Iteration 4 of 5").count(), 1);
    }

    #[test]
    fn first_round_prompt_layout() {
        let rt = runtime("Agent4", Role::Buyer, ScriptedPolicy::default());
        let percepts = Percepts {
            inbox: vec![],
            directory: vec![DirectoryEntry { agent: id("Agent1"), role: Role::Seller, listed_price: None }],
            own_state: "You have not bought a book yet.".into(),
        };
        let p = monitor(&rt, &percepts, &RoundClock::new(0, 5).unwrap()).unwrap();
        assert!(p.user.starts_with("Iteration 1 of 5\n"));
        assert!(p.system.contains("You are Agent4"));
        assert!(p.user.contains("- Agent1 (seller): no price listed"));
        assert!(p.user.contains("## Messages received\n(none)"));
        assert!(p.user.contains(GRAMMAR_INSTRUCTIONS));
        let order = ["Iteration", "## Your state", "## Marketplace directory", "## Your memory", "## Messages received", "## Your reply"];
        let positions: Vec<_> = order.iter().map(|s| p.user.find(s).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(!p.user.contains("final iteration"));
        let last = monitor(&rt, &percepts, &RoundClock::new(4, 5).unwrap()).unwrap();
        assert!(last.user.contains("This is the final iteration"));
    }

    #[test]
    fn history_shrinks_to_fit_the_context_budget() {
        let mut rt = runtime("Agent1", Role::Seller, ScriptedPolicy::default());
        for r in 0..40 {
            rt.history.append(HistoryEntry::new(r, EntryKind::Observation, "x".repeat(200))).unwrap();
        }
        let percepts = Percepts::default();
        let clock = RoundClock::new(40, 50).unwrap();
        let roomy = monitor(&rt, &percepts, &clock).unwrap();
        assert_eq!(roomy.history_entries, 40);

        rt.config.context_budget = roomy.tokens - 100;
        let tight = monitor(&rt, &percepts, &clock).unwrap();
        assert!(tight.tokens <= rt.config.context_budget);
        assert!(tight.history_entries < 40);
        // newest entries survive
        assert!(tight.user.contains("[iteration 40]"));

        rt.config.history_budget = 10;
        let small = monitor(&rt, &percepts, &clock).unwrap();
        assert_eq!(small.history_entries, 0);

        rt.config.context_budget = 20;
        assert!(matches!(monitor(&rt, &percepts, &clock), Err(LoopError::BudgetUnsatisfiable { budget: 20, .. })));
    }

    #[test]
    fn reason_returns_the_scripted_confirmation() {
        let mut policy = ScriptedPolicy::default();
        policy.push(id("Agent1"), 4, "CONFIRM_SALE Agent4 18.00");
        let rt = runtime("Agent1", Role::Seller, policy);
        let clock = RoundClock::new(4, 5).unwrap();
        let prompt = monitor(&rt, &Percepts::default(), &clock).unwrap();
        assert_eq!(reason(&rt, &prompt, &clock).unwrap().content, "CONFIRM_SALE Agent4 18.00");
    }

    #[test]
    fn repeated_runs_give_identical_responses() {
        let clock = RoundClock::new(4, 5).unwrap();
        let mut seen = Vec::new();
        for _ in 0..10 {
            let mut policy = ScriptedPolicy::default();
            policy.push(id("Agent1"), 4, "CONFIRM_SALE Agent4 18.00\nTime is running out.");
            let rt = runtime("Agent1", Role::Seller, policy);
            let prompt = monitor(&rt, &Percepts::default(), &clock).unwrap();
            seen.push(serde_json::to_vec(&reason(&rt, &prompt, &clock).unwrap()).unwrap());
        }
        assert!(seen.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn backend_errors_become_noop() {
        let mut rt = runtime("Agent1", Role::Seller, ScriptedPolicy::default());
        rt.backend = Arc::new(FailingBackend);
        let mut env = Recorder::default();
        let mut records = Vec::new();
        for r in 0..3 {
            records.push(step(&mut rt, &mut env, &RoundClock::new(r, 3).unwrap()));
        }
        assert_eq!(records.len(), 3);
        for rec in &records {
            assert!(rec.command.is_noop());
            assert!(rec.reply.is_auth_failure());
            assert!(rec.command.diagnostic.as_deref().unwrap().starts_with("backend error"));
            assert_eq!(rec.backend_calls(), 1);
        }
    }

    #[test]
    fn execute_applies_and_records_history() {
        let mut policy = ScriptedPolicy::default();
        policy.push(id("Agent4"), 2, "OFFER Agent1 18.00\nIt is the cheapest.");
        policy.push(id("Agent4"), 3, "what a nice day");
        let mut rt = runtime("Agent4", Role::Buyer, policy);
        let mut env = Recorder::default();
        env.inbox.push(msg("Agent1", "My price is 20.00", 0));
        let rec = step(&mut rt, &mut env, &RoundClock::new(2, 5).unwrap());
        assert_eq!(rec.command.action, Action::Offer { receiver: id("Agent1"), amount: Amount::from_cents(1800) });
        assert_eq!(rec.events.len(), 1);
        let kinds: Vec<_> = rt.history.entries().iter().map(|e| e.kind).collect();
        assert_eq!(kinds, [EntryKind::Observation, EntryKind::Received, EntryKind::Sent, EntryKind::ActionTaken]);

        let rec = step(&mut rt, &mut env, &RoundClock::new(3, 5).unwrap());
        assert!(rec.command.is_noop());
        assert!(rec.events.is_empty());
        assert_eq!(rt.history.entries().last().unwrap().kind, EntryKind::ActionTaken);
        assert!(rt.history.entries().last().unwrap().text.contains("unrecognized verb"));
        assert_eq!(env.applied.len(), 2);
    }
}
