#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use mapek_mas::llm::{CallContext, ChatRequest, ChatResponse, LlmBackend, LlmError, ScriptedBackend, ScriptedPolicy};
use mapek_mas::model::AgentId;
use mapek_mas::sim::{Execution, RunArtifacts, SimConfig, Simulation};
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name).join("config.json")
}

pub fn id(s: &str) -> AgentId {
    AgentId::new(s).unwrap()
}

/// Wraps a backend and counts calls per `(agent, round)`.
pub struct CountingBackend {
    inner: Arc<dyn LlmBackend>,
    pub calls: Mutex<BTreeMap<(AgentId, u32), u32>>,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn LlmBackend>) -> Self {
        CountingBackend { inner, calls: Mutex::new(BTreeMap::new()) }
    }

    pub fn snapshot(&self) -> BTreeMap<(AgentId, u32), u32> {
        self.calls.lock().unwrap().clone()
    }
}

impl LlmBackend for CountingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, ctx: &CallContext, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        *self.calls.lock().unwrap().entry((ctx.agent.clone(), ctx.round)).or_default() += 1;
        self.inner.complete(ctx, request)
    }
}

/// A randomly shaped scripted run.
pub struct RandomRun {
    pub config: SimConfig,
    pub policy: ScriptedPolicy,
}

const WORDS: &[&str] = &["book", "price", "deal", "cheap", "hello", "offer", "today", "maybe", "final", "thanks"];

fn amount(rng: &mut impl Rng) -> String {
    let cents: u32 = rng.random_range(100..4000);
    match rng.random_range(0..4) {
        0 => format!("{}", cents / 100),
        1 => format!("{}.{}", cents / 100, (cents % 100) / 10),
        _ => format!("{}.{:02}", cents / 100, cents % 100),
    }
}

fn words(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..6);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn reply(rng: &mut impl Rng, me: &str, agents: &[String]) -> String {
    let other = agents.choose(rng).unwrap().clone();
    let target = match rng.random_range(0..10) {
        0 => me.to_string(),
        1 => "Ghost".to_string(),
        _ => other,
    };
    let line = match rng.random_range(0..11) {
        0 => format!("SET_PRICE {}", amount(rng)),
        1 => format!("OFFER {target} {}", amount(rng)),
        2 => format!("ACCEPT {target} {}", amount(rng)),
        3 => format!("CONFIRM_SALE {target} {}", amount(rng)),
        4 => format!("QUERY_PRICE {target}"),
        5 | 6 => format!("SEND {target} {} #{}", words(rng), rng.next_u32() % 1000),
        7 => "NOOP".to_string(),
        8 => format!("EXPLAIN {}", words(rng)),
        9 => words(rng),
        _ => String::new(),
    };
    if rng.random_bool(0.3) {
        format!("{line}\n{}", words(rng))
    } else {
        line
    }
}

pub fn random_run(rng: &mut impl Rng) -> RandomRun {
    let n = rng.random_range(2..=6);
    let rounds = rng.random_range(1..=6);
    let names: Vec<String> = (1..=n).map(|i| format!("Agent{i}")).collect();
    let mut roles: Vec<&str> = (0..n).map(|_| if rng.random_bool(0.5) { "seller" } else { "buyer" }).collect();
    roles[0] = "seller";
    roles[1] = "buyer";
    let agents: Vec<String> =
        names.iter().zip(&roles).map(|(n, r)| format!(r#"{{"id": "{n}", "role": "{r}"}}"#)).collect();
    let json = format!(
        r#"{{"run_id": "random", "rounds": {rounds}, "history_budget": {}, "context_budget": {},
            "backend": {{"kind": "scripted", "script": "generated.json"}}, "agents": [{}]}}"#,
        rng.random_range(20..=600),
        rng.random_range(480..=1500),
        agents.join(",")
    );
    let config = SimConfig::from_json(&json, Path::new(".")).expect("generated config is valid");
    let mut policy = ScriptedPolicy::new("NOOP");
    for name in &names {
        for round in 0..=rounds {
            policy.push(id(name), round, reply(rng, name, &names));
        }
    }
    RandomRun { config, policy }
}

pub fn run_counted(run: &RandomRun, execution: Execution) -> (RunArtifacts, BTreeMap<(AgentId, u32), u32>) {
    let counting = Arc::new(CountingBackend::new(Arc::new(ScriptedBackend::new(run.policy.clone()))));
    let sim = Simulation::with_backend(run.config.clone(), counting.clone()).unwrap().execution(execution);
    let artifacts = sim.run();
    (artifacts, counting.snapshot())
}

pub fn run_scenario(name: &str, execution: Execution) -> RunArtifacts {
    let config = SimConfig::load(&scenario(name)).unwrap();
    Simulation::from_config(config).unwrap().execution(execution).run()
}
