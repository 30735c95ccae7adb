mod common;

use std::path::Path;
use std::sync::Arc;

use common::{id, random_run, run_counted, run_scenario};
use mapek_mas::llm::{CallContext, ChatRequest, ChatResponse, LlmBackend, LlmError};
use mapek_mas::sim::{Execution, RunOutcome, SimConfig, Simulation, TranscriptRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Failing(LlmError);

impl LlmBackend for Failing {
    fn id(&self) -> &str {
        "failing"
    }

    fn complete(&self, _: &CallContext, _: &ChatRequest) -> Result<ChatResponse, LlmError> {
        Err(self.0.clone())
    }
}

fn config(rounds: u32, agents: &[(&str, &str)]) -> SimConfig {
    let list: Vec<String> = agents.iter().map(|(i, r)| format!(r#"{{"id": "{i}", "role": "{r}"}}"#)).collect();
    let json = format!(
        r#"{{"rounds": {rounds}, "backend": {{"kind": "scripted", "script": "s.json"}}, "agents": [{}]}}"#,
        list.join(",")
    );
    SimConfig::from_json(&json, Path::new(".")).unwrap()
}

const FIVE: &[(&str, &str)] =
    &[("Agent1", "seller"), ("Agent2", "seller"), ("Agent3", "seller"), ("Agent4", "buyer"), ("Agent5", "buyer")];

#[cfg(feature = "parallel")]
proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn parallel_and_sequential_runs_are_identical(seed in any::<u64>()) {
        let run = random_run(&mut ChaCha8Rng::seed_from_u64(seed));
        let (seq, _) = run_counted(&run, Execution::Sequential);
        let (par, _) = run_counted(&run, Execution::Parallel);
        prop_assert_eq!(seq.transcript_jsonl(), par.transcript_jsonl());
        prop_assert_eq!(seq.histories, par.histories);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_runs_replay_and_keep_the_books_balanced(seed in any::<u64>()) {
        let run = random_run(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, _) = run_counted(&run, Execution::default());
        prop_assert!(a.ledger.check_consistency().is_ok());
        prop_assert_eq!(a.ledger.total_revenue(), a.ledger.total_spent());
        let summary = mapek_mas::sim::replay_text(&a.transcript_jsonl());
        prop_assert!(summary.is_ok(), "{:?}", summary.err());
        prop_assert_eq!(summary.unwrap().report, a.report.clone());

        // Rounds never go backwards and the report closes the transcript.
        let rounds: Vec<u32> = a.records.iter().map(TranscriptRecord::round).collect();
        prop_assert!(rounds.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(a.records.first().map(|r| r.record_type()), Some("config"));
        prop_assert_eq!(a.records.last().map(|r| r.record_type()), Some("report"));
        prop_assert_eq!(a.records.iter().filter(|r| r.record_type() == "report").count(), 1);
    }
}

#[test]
fn failing_backend_still_completes_every_cycle() {
    let backend = Arc::new(Failing(LlmError::Transport("connection refused".into())));
    let a = Simulation::with_backend(config(4, FIVE), backend).unwrap().run();
    let cycles: Vec<_> = a.records.iter().filter(|r| r.record_type() == "cycle").collect();
    assert_eq!(cycles.len(), 5 * 4);
    for r in cycles {
        let TranscriptRecord::Cycle { action, error, backend_calls, .. } = r else { unreachable!() };
        assert_eq!(action.command, "NOOP");
        assert!(action.diagnostic.as_deref().unwrap().starts_with("backend error"));
        assert!(error.is_some());
        assert_eq!(*backend_calls, 1);
    }
    assert_eq!(a.report.stats.cycles, 20);
    assert_eq!(a.report.stats.auth_failures, 0);
    assert!(a.report.explanations.values().all(|e| e.empty));
    assert!(a.report.seller_winner.is_none() && a.report.buyer_winner.is_none());
}

#[test]
fn auth_failures_are_counted_and_set_exit_code_three() {
    let backend = Arc::new(Failing(LlmError::Auth("HTTP 401".into())));
    let artifacts = Simulation::with_backend(config(2, FIVE), backend).unwrap().run();
    assert_eq!(artifacts.auth_failures(), 5 * 2 + 5);
    let dir = tempfile::tempdir().unwrap();
    let paths = artifacts.write_to(dir.path()).unwrap();
    assert_eq!(RunOutcome { artifacts, paths }.exit_code(), 3);
}

#[test]
fn one_round_of_noops_has_no_winners_or_anomalies() {
    let backend = Arc::new(mapek_mas::llm::ScriptedBackend::new(Default::default()));
    let a = Simulation::with_backend(config(1, FIVE), backend).unwrap().run();
    assert!(a.report.seller_winner.is_none() && a.report.buyer_winner.is_none());
    assert!(a.report.anomalies.is_empty());
    assert_eq!(a.report.stats.cycles, 5);
}

#[test]
fn round_banner_audit() {
    let a = run_scenario("marketplace", Execution::default());
    let text = a.transcript_jsonl();
    let cycle_lines: Vec<&str> = text.lines().filter(|l| l.contains(r#""record_type":"cycle""#)).collect();
    let hits: usize = (1..=5).map(|k| {
        let banner = format!("Iteration {k} of 5");
        cycle_lines.iter().filter(|l| l.contains(&banner)).count()
    }).sum();
    assert_eq!(hits, 5 * 5);
}

#[test]
fn final_round_is_announced_only_once() {
    let a = run_scenario("marketplace", Execution::default());
    for r in &a.records {
        if let TranscriptRecord::Cycle { round, prompt: Some(p), .. } = r {
            assert_eq!(p.user.contains("final iteration"), *round == 4, "round {round}");
        }
    }
}

#[test]
fn artifacts_are_written_to_the_output_directory() {
    let a = run_scenario("marketplace", Execution::default());
    let dir = tempfile::tempdir().unwrap();
    let paths = a.write_to(dir.path()).unwrap();
    let transcript = std::fs::read_to_string(&paths.transcript).unwrap();
    assert_eq!(transcript, a.transcript_jsonl());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&paths.report_json).unwrap()).unwrap();
    assert_eq!(report["seller_winner"]["agent"], "Agent1");
    assert_eq!(report["buyer_winner"]["amount"], "18.00");
    assert!(std::fs::read_to_string(&paths.report_text).unwrap().contains("Winning seller: Agent1 (18.00)"));
    let effective: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&paths.effective_config).unwrap()).unwrap();
    assert_eq!(effective["agents"][0]["temperature"], 0.7);
    assert_eq!(effective["history_budget"], 3000);
    for agent in ["Agent1", "Agent2", "Agent3", "Agent4", "Agent5"] {
        let dump: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(paths.histories.join(format!("{agent}.json"))).unwrap())
                .unwrap();
        let entries = dump["entries"].as_array().unwrap();
        assert!(entries.len() >= 5 * 2, "{agent} has {} entries", entries.len());
    }
}

#[test]
fn agent1_remembers_both_offers_from_agent4() {
    let a = run_scenario("marketplace", Execution::default());
    let texts: Vec<&str> = a.histories[&id("Agent1")].entries().iter().map(|e| e.text.as_str()).collect();
    let offers = texts.iter().filter(|t| t.contains("from Agent4 [propose]: OFFER 18.00")).count();
    assert_eq!(offers, 2, "{texts:#?}");
}

#[test]
fn the_first_record_echoes_the_effective_config() {
    let path = common::scenario("marketplace");
    let a = run_scenario("marketplace", Execution::default());
    let TranscriptRecord::Config { config, .. } = &a.records[0] else { panic!("first record is not the config") };
    assert_eq!(config, &SimConfig::load(&path).unwrap());
    assert_eq!(config.agents.len(), 5);
}
