use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::knowledge::Explanations;
use crate::marketplace::{AnomalyEvent, Purchase, SellerTotals, Settlement, Winner, WinnerReport};
use crate::model::AgentId;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub cycles: u64,
    pub backend_calls: u64,
    pub messages_accepted: u64,
    pub messages_dropped: u64,
    pub messages_delivered: u64,
    pub auth_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub text: String,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub rounds: u32,
    pub seller_winner: Option<Winner>,
    pub buyer_winner: Option<Winner>,
    pub sellers: BTreeMap<AgentId, SellerTotals>,
    pub buyers: BTreeMap<AgentId, Option<Purchase>>,
    pub settlements: Vec<Settlement>,
    pub anomalies: Vec<AnomalyEvent>,
    pub explanations: BTreeMap<AgentId, ExplanationEntry>,
    pub stats: RunStats,
}

impl Report {
    pub fn new(
        run_id: &str,
        rounds: u32,
        winners: WinnerReport,
        settlements: Vec<Settlement>,
        anomalies: Vec<AnomalyEvent>,
        explanations: &Explanations,
        stats: RunStats,
    ) -> Self {
        Report {
            run_id: run_id.to_string(),
            rounds,
            seller_winner: winners.seller,
            buyer_winner: winners.buyer,
            sellers: winners.sellers,
            buyers: winners.buyers,
            settlements,
            anomalies,
            explanations: explanations
                .iter()
                .map(|e| (e.agent.clone(), ExplanationEntry { text: e.text.clone(), empty: e.empty }))
                .collect(),
            stats,
        }
    }

    /// Plain-text summary for humans.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let winner = |w: &Option<Winner>| match w {
            Some(w) => format!("{} ({})", w.agent, w.amount),
            None => "no winner".to_string(),
        };
        let _ = writeln!(out, "Run {} ({} iterations)", self.run_id, self.rounds);
        let _ = writeln!(out, "Winning seller: {}", winner(&self.seller_winner));
        let _ = writeln!(out, "Winning buyer:  {}", winner(&self.buyer_winner));
        let _ = writeln!(out, "\nSellers:");
        for (id, t) in &self.sellers {
            let _ = writeln!(out, "  {id}: revenue {} from {} sale(s)", t.revenue, t.sales);
        }
        let _ = writeln!(out, "\nBuyers:");
        for (id, p) in &self.buyers {
            match p {
                Some(p) => {
                    let _ = writeln!(out, "  {id}: bought from {} at {} (iteration {})", p.seller, p.price, p.round + 1);
                }
                None => {
                    let _ = writeln!(out, "  {id}: no purchase");
                }
            }
        }
        let _ = writeln!(out, "\nAnomalies: {}", self.anomalies.len());
        for a in &self.anomalies {
            let _ = writeln!(out, "  iteration {} {} {:?}: {}", a.round + 1, a.agent, a.kind, a.detail);
        }
        let _ = writeln!(out, "\nExplanations:");
        for (id, e) in &self.explanations {
            if e.empty {
                let _ = writeln!(out, "  {id}: (empty)");
            } else {
                let _ = writeln!(out, "  {id}:");
                for line in e.text.lines() {
                    let _ = writeln!(out, "    {line}");
                }
            }
        }
        let s = &self.stats;
        let _ = writeln!(
            out,
            "\n{} cycles, {} model calls, {} messages accepted ({} dropped, {} delivered), {} auth failures",
            s.cycles, s.backend_calls, s.messages_accepted, s.messages_dropped, s.messages_delivered, s.auth_failures
        );
        out
    }
}
