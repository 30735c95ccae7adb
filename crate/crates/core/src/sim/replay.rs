//! Offline replay. Re-applies every recorded command to a fresh market
//! and checks that the transcript's messages, settlements, anomalies and
//! final report are exactly what those commands produce.

use thiserror::Error;

use super::driver::Market;
use super::report::{Report, RunStats};
use super::transcript::{event_records, outcome_of, TranscriptRecord};
use crate::knowledge::Explanations;
use crate::mapek::{CycleEvent, Environment};
use crate::marketplace::{detect_anomalies, determine_winners};
use crate::model::{parse_action, ActionCommand, RoundClock};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("transcript is empty")]
    Empty,
    #[error("first record must be the run configuration")]
    MissingConfig,
    #[error("transcript has no final report")]
    MissingReport,
    #[error("record {index}: {detail}")]
    Mismatch { index: usize, detail: String },
}

/// What a successful replay established.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplaySummary {
    pub run_id: String,
    pub records: usize,
    pub cycles: u64,
    pub report: Report,
}

pub fn replay_text(text: &str) -> Result<ReplaySummary, ReplayError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|source| ReplayError::Parse { line: i + 1, source })?;
        records.push(record);
    }
    replay_records(&records)
}

pub fn replay_records(records: &[TranscriptRecord]) -> Result<ReplaySummary, ReplayError> {
    let Some(first) = records.first() else {
        return Err(ReplayError::Empty);
    };
    let TranscriptRecord::Config { config, run_id, .. } = first else {
        return Err(ReplayError::MissingConfig);
    };
    let total = config.rounds;
    let agents = config.sorted_agents();
    let mut market = Market::new(agents.iter().map(|a| (&a.id, a.role)).collect::<Vec<_>>());
    let mut stats = RunStats::default();
    let mut explanations = Explanations::new();
    let mut accepted = Vec::new();
    let mut bus_round = 0u32;
    let mut embedded: Option<&Report> = None;

    let mismatch = |index: usize, detail: String| ReplayError::Mismatch { index, detail };
    let mut i = 1;
    while i < records.len() {
        let record = &records[i];
        match record {
            TranscriptRecord::Cycle { round, agent, inbox, backend_calls, auth_failure, action, .. } => {
                if *round >= total {
                    return Err(mismatch(i, format!("cycle in round {round} of a {total}-round run")));
                }
                while bus_round < *round {
                    market.bus.advance_round();
                    bus_round += 1;
                }
                let clock = RoundClock::new(*round, total).expect("round < total");
                let percepts = market.percepts(agent, &clock);
                if &percepts.inbox != inbox {
                    return Err(mismatch(i, format!("inbox of {agent} differs from the replayed delivery")));
                }
                let parsed = parse_action(&action.raw);
                if parsed.action.to_string() != action.command {
                    return Err(mismatch(
                        i,
                        format!("raw output parses to {:?}, transcript says {:?}", parsed.action.to_string(), action.command),
                    ));
                }
                let command = ActionCommand { action: parsed.action, ..ActionCommand::noop("", "") };
                let events = market.apply(agent, &command, &clock);

                stats.cycles += 1;
                stats.backend_calls += u64::from(*backend_calls);
                stats.messages_delivered += inbox.len() as u64;
                stats.auth_failures += u64::from(*auth_failure);
                for e in &events {
                    match e {
                        CycleEvent::MessageAccepted { message, .. } => {
                            stats.messages_accepted += 1;
                            accepted.push(message.clone());
                        }
                        CycleEvent::MessageDropped { .. } => stats.messages_dropped += 1,
                        _ => {}
                    }
                }

                let mut expected = vec![TranscriptRecord::Action {
                    run_id: run_id.clone(),
                    round: *round,
                    agent: agent.clone(),
                    command: command.action.to_string(),
                    outcome: outcome_of(&command, &events),
                }];
                expected.extend(event_records(run_id, &events));
                for (k, want) in expected.iter().enumerate() {
                    let at = i + 1 + k;
                    match records.get(at) {
                        Some(got) if got == want => {}
                        Some(got) => {
                            return Err(mismatch(
                                at,
                                format!("expected {} but transcript has {}", want.to_line(), got.to_line()),
                            ))
                        }
                        None => return Err(mismatch(at, format!("missing {}", want.to_line()))),
                    }
                }
                i += 1 + expected.len();
                continue;
            }
            TranscriptRecord::Explanation { round, agent, inbox, prompt, response, auth_failure, text, empty, .. } => {
                if *round != total {
                    return Err(mismatch(i, format!("explanation in round {round}, expected {total}")));
                }
                while bus_round < total {
                    market.bus.advance_round();
                    bus_round += 1;
                }
                let clock = RoundClock::new(total, total).expect("valid clock");
                let percepts = market.percepts(agent, &clock);
                if &percepts.inbox != inbox {
                    return Err(mismatch(i, format!("final inbox of {agent} differs from the replayed delivery")));
                }
                let content = response.as_ref().map(|r| r.content.as_str()).unwrap_or("");
                let stored = explanations.record(agent, content, &clock).expect("explanation phase");
                if &stored.text != text || stored.empty != *empty {
                    return Err(mismatch(i, format!("explanation of {agent} does not match its response")));
                }
                stats.messages_delivered += inbox.len() as u64;
                stats.backend_calls += u64::from(prompt.is_some());
                stats.auth_failures += u64::from(*auth_failure);
            }
            TranscriptRecord::Report { report, .. } => {
                if i + 1 != records.len() {
                    return Err(mismatch(i, "report is not the last record".into()));
                }
                embedded = Some(report);
            }
            other => {
                return Err(mismatch(i, format!("unexpected {} record outside a cycle", other.record_type())));
            }
        }
        i += 1;
    }
    let Some(embedded) = embedded else {
        return Err(ReplayError::MissingReport);
    };
    let ledger = &market.ledger;
    let rebuilt = Report::new(
        run_id,
        total,
        determine_winners(ledger),
        ledger.settlements.clone(),
        detect_anomalies(&accepted, &ledger.anomalies),
        &explanations,
        stats.clone(),
    );
    if &rebuilt != embedded {
        let want = serde_json::to_value(&rebuilt).expect("report serializes");
        let got = serde_json::to_value(embedded).expect("report serializes");
        let mut fields = Vec::new();
        if let (Some(w), Some(g)) = (want.as_object(), got.as_object()) {
            for (k, v) in w {
                if g.get(k) != Some(v) {
                    fields.push(k.clone());
                }
            }
        }
        return Err(mismatch(records.len() - 1, format!("report differs in: {}", fields.join(", "))));
    }
    Ok(ReplaySummary { run_id: run_id.clone(), records: records.len(), cycles: stats.cycles, report: rebuilt })
}
