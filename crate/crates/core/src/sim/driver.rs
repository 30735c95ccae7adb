//! The round driver. Each round: deliver inboxes, run every agent's cycle,
//! then apply the resulting commands at the barrier in agent-id order.
//! After the last round each agent is asked once to explain itself.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use super::config::{AgentSpec, BackendConfig, ConfigError, SimConfig};
use super::report::{Report, RunStats};
use super::transcript::{
    cycle_records, reply_views, PromptView, TranscriptRecord,
};
use crate::knowledge::{Explanations, History};
use crate::llm::{LlmBackend, LlmError, OpenAiCompatible, ScriptError, ScriptedBackend, ScriptedPolicy, ENV_API_KEY};
use crate::mapek::{
    execute, explanation_prompt, plan_cycle, reason, AgentRuntime, CycleEvent, CycleRecord, Environment, Percepts,
    PlannedCycle, Reply,
};
use crate::marketplace::{determine_winners, detect_anomalies, Ledger, MarketEffect};
use crate::messaging::{BusEvent, MessageBus};
use crate::model::{ActionCommand, AgentId, Message, Role, RoundClock};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("backend authentication: {0}")]
    Auth(String),
    #[error("backend setup failed: {0}")]
    Backend(LlmError),
    #[error("writing run artifacts to {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl SimError {
    /// 2 for configuration problems, 3 for credentials, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) | SimError::Script(_) => 2,
            SimError::Auth(_) => 3,
            SimError::Backend(_) | SimError::Io { .. } => 1,
        }
    }
}

/// How agent cycles within a round are scheduled. Both produce identical
/// transcripts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

fn map_in_order<T, U, F>(execution: Execution, items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    match execution {
        Execution::Sequential => items.into_iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().map(f).collect()
        }
    }
}

/// The managed element: message bus plus settlement ledger.
#[derive(Debug, Clone)]
pub struct Market {
    pub bus: MessageBus,
    pub ledger: Ledger,
}

impl Market {
    pub fn new<'a>(agents: impl IntoIterator<Item = (&'a AgentId, Role)> + Clone) -> Self {
        let mut bus = MessageBus::new();
        for (id, role) in agents.clone() {
            bus.register(id.clone(), role).expect("agent ids are unique");
        }
        let ledger = Ledger::with_agents(agents).expect("agent ids are unique");
        Market { bus, ledger }
    }

    pub fn own_state(&self, agent: &AgentId) -> String {
        if let Some(s) = self.ledger.sellers.get(agent) {
            let price = match s.listed_price {
                Some(p) => format!("Your current price is {p}."),
                None => "You have not set a price yet.".to_string(),
            };
            return format!("{price} Books sold: {}. Revenue so far: {}.", s.sales.len(), s.revenue);
        }
        let Some(b) = self.ledger.buyers.get(agent) else {
            return String::new();
        };
        let purchase = match &b.purchase {
            Some(p) => format!("You bought the book from {} for {}.", p.seller, p.price),
            None => "You have not bought a book yet.".to_string(),
        };
        if b.outstanding_offers.is_empty() {
            purchase
        } else {
            let offers: Vec<_> = b.outstanding_offers.iter().map(|(s, a)| format!("{s} {a}")).collect();
            format!("{purchase} Your standing offers: {}.", offers.join(", "))
        }
    }
}

impl Environment for Market {
    fn percepts(&mut self, agent: &AgentId, clock: &RoundClock) -> Percepts {
        let inbox = self
            .bus
            .collect_inbox(agent, clock.current())
            .expect("driver keeps the bus on the current round");
        Percepts { inbox, directory: self.bus.directory_snapshot(), own_state: self.own_state(agent) }
    }

    fn apply(&mut self, agent: &AgentId, command: &ActionCommand, clock: &RoundClock) -> Vec<CycleEvent> {
        let effects = self
            .ledger
            .apply_action(agent, &command.action, clock)
            .expect("every runtime is registered in the ledger");
        let mut events = Vec::new();
        for effect in effects {
            match effect {
                MarketEffect::PriceListed { seller, price } => {
                    self.bus.set_price(&seller, price).expect("only sellers list prices");
                    events.push(CycleEvent::PriceListed { seller, price });
                }
                MarketEffect::OfferRecorded { buyer, seller, amount } => {
                    events.push(CycleEvent::OfferRecorded { buyer, seller, amount })
                }
                MarketEffect::Message { receiver, performative, body } => {
                    // dropped sends are reported through the bus event log
                    let _ = self.bus.post(agent, &receiver, performative, body);
                    events.extend(self.bus.drain_events().into_iter().map(|e| match e {
                        BusEvent::Accepted { message, self_addressed } => {
                            CycleEvent::MessageAccepted { message, self_addressed }
                        }
                        BusEvent::Dropped { message, reason } => CycleEvent::MessageDropped { message, reason },
                    }));
                }
                MarketEffect::Settled(s) => events.push(CycleEvent::Settled(s)),
                MarketEffect::Anomaly(a) => events.push(CycleEvent::Anomaly(a)),
            }
        }
        events
    }
}

/// Everything a run produced, before anything is written to disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: SimConfig,
    pub records: Vec<TranscriptRecord>,
    pub report: Report,
    pub histories: BTreeMap<AgentId, History>,
    pub ledger: Ledger,
}

#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub transcript: PathBuf,
    pub report_json: PathBuf,
    pub report_text: PathBuf,
    pub effective_config: PathBuf,
    pub histories: PathBuf,
}

impl RunArtifacts {
    pub fn transcript_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn auth_failures(&self) -> u64 {
        self.report.stats.auth_failures
    }

    pub fn write_to(&self, dir: &Path) -> Result<OutputPaths, SimError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| SimError::Io { path, source }
        };
        let histories = dir.join("histories");
        std::fs::create_dir_all(&histories).map_err(io(&histories))?;
        let paths = OutputPaths {
            transcript: dir.join("transcript.jsonl"),
            report_json: dir.join("report.json"),
            report_text: dir.join("report.txt"),
            effective_config: dir.join("effective_config.json"),
            histories,
        };
        let write = |path: &Path, text: String| std::fs::write(path, text).map_err(io(path));
        write(&paths.transcript, self.transcript_jsonl())?;
        write(&paths.report_json, serde_json::to_string_pretty(&self.report).expect("report serializes") + "\n")?;
        write(&paths.report_text, self.report.to_text())?;
        write(&paths.effective_config, self.config.to_json_pretty() + "\n")?;
        for (agent, history) in &self.histories {
            let path = paths.histories.join(format!("{agent}.json"));
            write(&path, serde_json::to_string_pretty(history).expect("history serializes") + "\n")?;
        }
        Ok(paths)
    }
}

pub struct Simulation {
    config: SimConfig,
    runtimes: Vec<AgentRuntime>,
    market: Market,
    execution: Execution,
}

impl Simulation {
    /// Binds each agent to the backend `backend_for` returns.
    pub fn new(
        config: SimConfig,
        mut backend_for: impl FnMut(&AgentSpec) -> Result<Arc<dyn LlmBackend>, SimError>,
    ) -> Result<Self, SimError> {
        let mut runtimes = Vec::new();
        for spec in config.sorted_agents() {
            let template = config.template_text(&spec.template).ok_or_else(|| {
                ConfigError::Validation(vec![super::config::FieldError {
                    field: format!("agents.{}.template", spec.id),
                    message: format!("unknown template {:?}", spec.template),
                }])
            })?;
            let backend = backend_for(spec)?;
            runtimes.push(AgentRuntime::new(
                spec.id.clone(),
                spec.role,
                template,
                backend,
                config.agent_config(spec),
            ));
        }
        let market = Market::new(runtimes.iter().map(|r| (&r.id, r.role)).collect::<Vec<_>>());
        Ok(Simulation { config, runtimes, market, execution: Execution::default() })
    }

    /// Every agent shares one backend.
    pub fn with_backend(config: SimConfig, backend: Arc<dyn LlmBackend>) -> Result<Self, SimError> {
        Self::new(config, |_| Ok(backend.clone()))
    }

    /// Builds backends as the config describes: one shared scripted backend,
    /// or one live client per agent with that agent's credentials.
    pub fn from_config(config: SimConfig) -> Result<Self, SimError> {
        match config.backend.clone() {
            BackendConfig::Scripted { default_reply, .. } => {
                let path = config.script_path().expect("scripted backend has a script");
                let policy = ScriptedPolicy::load(&path, default_reply)?;
                Self::with_backend(config, Arc::new(ScriptedBackend::new(policy)))
            }
            BackendConfig::Live => Self::new(config, |spec| {
                let key = match &spec.api_key_env {
                    Some(var) => std::env::var(var).ok(),
                    None => std::env::var(ENV_API_KEY).ok(),
                };
                let client = OpenAiCompatible::from_env(spec.api_base.as_deref(), key).map_err(SimError::Backend)?;
                if !client.has_credentials() {
                    let var = spec.api_key_env.as_deref().unwrap_or(ENV_API_KEY);
                    return Err(SimError::Auth(format!("no API key for {} (set {var})", spec.id)));
                }
                Ok(Arc::new(client))
            }),
        }
    }

    pub fn execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn run(mut self) -> RunArtifacts {
        let run_id = self.config.run_id.clone();
        let total = self.config.rounds;
        let execution = self.execution;
        let mut stats = RunStats::default();
        let mut records = vec![TranscriptRecord::Config {
            run_id: run_id.clone(),
            round: 0,
            agent: None,
            config: self.config.clone(),
        }];
        let mut accepted_messages: Vec<Message> = Vec::new();

        for round in 0..total {
            let clock = RoundClock::new(round, total).expect("round < total");
            let percepts: Vec<Percepts> =
                self.runtimes.iter().map(|rt| self.market.percepts(&rt.id, &clock)).collect();
            let work: Vec<(&AgentRuntime, Percepts)> = self.runtimes.iter().zip(percepts).collect();
            let planned: Vec<PlannedCycle> =
                map_in_order(execution, work, |(rt, p)| plan_cycle(rt, p, &clock));

            for (rt, plan) in self.runtimes.iter_mut().zip(planned) {
                let cycle = execute(rt, plan, &mut self.market, &clock);
                tally_cycle(&mut stats, &cycle, &mut accepted_messages);
                records.extend(cycle_records(&run_id, &cycle));
            }
            let expired = self.market.bus.advance_round();
            debug_assert!(expired.is_empty(), "every agent collects its inbox each round");
        }

        // Explanation phase: the bus now sits at round `total`, so messages
        // sent in the last round are delivered here.
        let clock = RoundClock::new(total, total).expect("valid clock");
        let percepts: Vec<Percepts> = self.runtimes.iter().map(|rt| self.market.percepts(&rt.id, &clock)).collect();
        let work: Vec<(&AgentRuntime, Percepts)> = self.runtimes.iter().zip(percepts).collect();
        let replies = map_in_order(execution, work, |(rt, p)| {
            let prompt = explanation_prompt(rt, &p, &clock);
            let reply = match &prompt {
                Ok(prompt) => match reason(rt, prompt, &clock) {
                    Ok(r) => Reply::Response(r),
                    Err(e) => Reply::Failed(e),
                },
                Err(e) => Reply::Skipped(e.clone()),
            };
            (p, prompt.ok(), reply)
        });
        let mut explanations = Explanations::new();
        for (rt, (p, prompt, reply)) in self.runtimes.iter().zip(replies) {
            let stored = explanations
                .record(&rt.id, reply.content(), &clock)
                .expect("clock is in the explanation phase")
                .clone();
            stats.messages_delivered += p.inbox.len() as u64;
            stats.backend_calls += u64::from(!matches!(reply, Reply::Skipped(_)));
            stats.auth_failures += u64::from(reply.is_auth_failure());
            let (response, error, auth_failure) = reply_views(&reply);
            records.push(TranscriptRecord::Explanation {
                run_id: run_id.clone(),
                round: total,
                agent: rt.id.clone(),
                inbox: p.inbox,
                prompt: prompt.as_ref().map(PromptView::from),
                response,
                error,
                auth_failure,
                text: stored.text,
                empty: stored.empty,
            });
        }
        debug_assert_eq!(self.market.bus.accepted_count(), self.market.bus.delivered_count());

        let ledger = self.market.ledger.clone();
        let anomalies = detect_anomalies(&accepted_messages, &ledger.anomalies);
        let report = Report::new(
            &run_id,
            total,
            determine_winners(&ledger),
            ledger.settlements.clone(),
            anomalies,
            &explanations,
            stats,
        );
        records.push(TranscriptRecord::Report {
            run_id: run_id.clone(),
            round: total,
            agent: None,
            report: report.clone(),
        });
        let histories = self.runtimes.iter().map(|rt| (rt.id.clone(), rt.history.clone())).collect();
        RunArtifacts { config: self.config, records, report, histories, ledger }
    }
}

fn tally_cycle(stats: &mut RunStats, cycle: &CycleRecord, accepted: &mut Vec<Message>) {
    stats.cycles += 1;
    stats.backend_calls += u64::from(cycle.backend_calls());
    stats.messages_delivered += cycle.inbox.len() as u64;
    stats.auth_failures += u64::from(cycle.reply.is_auth_failure());
    for e in &cycle.events {
        match e {
            CycleEvent::MessageAccepted { message, .. } => {
                stats.messages_accepted += 1;
                accepted.push(message.clone());
            }
            CycleEvent::MessageDropped { .. } => stats.messages_dropped += 1,
            _ => {}
        }
    }
}

/// Result of [`run_simulation`]: where things were written and how the
/// process should exit.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub artifacts: RunArtifacts,
    pub paths: OutputPaths,
}

impl RunOutcome {
    /// 0 on success, 3 if any model call was rejected for credentials.
    /// Anomalies never fail a run.
    pub fn exit_code(&self) -> i32 {
        if self.artifacts.auth_failures() > 0 {
            3
        } else {
            0
        }
    }
}

/// Runs the configured simulation and writes transcript, report and
/// histories into the config's output directory.
pub fn run_simulation(config: &SimConfig) -> Result<RunOutcome, SimError> {
    let out_dir = config.output_dir.clone();
    let artifacts = Simulation::from_config(config.clone())?.run();
    let paths = artifacts.write_to(&out_dir)?;
    Ok(RunOutcome { artifacts, paths })
}
