//! The book marketplace: sellers list prices for identical copies, buyers
//! each want one copy as cheaply as possible. Holds the settlement ledger,
//! picks winners, and flags pathological behaviour.
//!
//! Settlement rules:
//! - `CONFIRM_SALE b p` by a seller settles at `p` iff `b` is a buyer with no
//!   purchase whose latest offer to that seller is at least `p`.
//! - `ACCEPT s p` by a buyer settles iff `p` equals `s`'s publicly listed
//!   price (as of the end of the previous round) and the buyer has not
//!   bought yet.
//!
//! Any other settlement attempt is recorded as an [`AnomalyEvent`] and has no
//! effect on the ledger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, AgentId, Amount, Message, Performative, Role, RoundClock};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarketError {
    #[error("agent {0} is not part of the market")]
    UnknownAgent(AgentId),
    #[error("agent {0} registered twice")]
    DuplicateAgent(AgentId),
    #[error("ledger inconsistency: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    SelfSale,
    ConfirmToNonBuyer,
    ConfirmWithoutOffer,
    DoublePurchaseAttempt,
    SelfMessage,
    RoleViolation,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub round: u32,
    pub agent: AgentId,
    pub kind: AnomalyKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub seller: AgentId,
    pub buyer: AgentId,
    pub price: Amount,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sale {
    pub buyer: AgentId,
    pub price: Amount,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Purchase {
    pub seller: AgentId,
    pub price: Amount,
    pub round: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SellerState {
    pub listed_price: Option<Amount>,
    /// `(round, price)` for every SET_PRICE, oldest first.
    pub price_changes: Vec<(u32, Amount)>,
    pub sales: Vec<Sale>,
    pub revenue: Amount,
}

impl SellerState {
    /// The price other agents could see during `round`.
    pub fn public_price_at(&self, round: u32) -> Option<Amount> {
        self.price_changes.iter().rev().find(|(r, _)| *r < round).map(|(_, p)| *p)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuyerState {
    pub purchase: Option<Purchase>,
    /// Latest offer per seller; a new offer overwrites the previous one.
    pub outstanding_offers: BTreeMap<AgentId, Amount>,
}

/// What applying one action did. The driver turns messages and price
/// listings into bus operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MarketEffect {
    PriceListed { seller: AgentId, price: Amount },
    OfferRecorded { buyer: AgentId, seller: AgentId, amount: Amount },
    Message { receiver: AgentId, performative: Performative, body: String },
    Settled(Settlement),
    Anomaly(AnomalyEvent),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    pub sellers: BTreeMap<AgentId, SellerState>,
    pub buyers: BTreeMap<AgentId, BuyerState>,
    pub anomalies: Vec<AnomalyEvent>,
    pub settlements: Vec<Settlement>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_agents<'a>(agents: impl IntoIterator<Item = (&'a AgentId, Role)>) -> Result<Self, MarketError> {
        let mut ledger = Ledger::new();
        for (id, role) in agents {
            ledger.register(id.clone(), role)?;
        }
        Ok(ledger)
    }

    pub fn register(&mut self, agent: AgentId, role: Role) -> Result<(), MarketError> {
        if self.role_of(&agent).is_some() {
            return Err(MarketError::DuplicateAgent(agent));
        }
        match role {
            Role::Seller => {
                self.sellers.insert(agent, SellerState::default());
            }
            Role::Buyer => {
                self.buyers.insert(agent, BuyerState::default());
            }
        }
        Ok(())
    }

    pub fn role_of(&self, agent: &AgentId) -> Option<Role> {
        if self.sellers.contains_key(agent) {
            Some(Role::Seller)
        } else if self.buyers.contains_key(agent) {
            Some(Role::Buyer)
        } else {
            None
        }
    }

    /// Applies one agent's action for the round described by `clock`.
    pub fn apply_action(
        &mut self,
        agent: &AgentId,
        action: &Action,
        clock: &RoundClock,
    ) -> Result<Vec<MarketEffect>, MarketError> {
        let role = self.role_of(agent).ok_or_else(|| MarketError::UnknownAgent(agent.clone()))?;
        let round = clock.current();
        let effects = match (role, action) {
            (_, Action::Noop) | (_, Action::Explain(_)) => Vec::new(),
            (_, Action::Send { receiver, text }) => vec![MarketEffect::Message {
                receiver: receiver.clone(),
                performative: Performative::Inform,
                body: text.clone(),
            }],
            (_, Action::QueryPrice(receiver)) => vec![MarketEffect::Message {
                receiver: receiver.clone(),
                performative: Performative::Query,
                body: "What is your price?".into(),
            }],
            (Role::Seller, Action::SetPrice(price)) => {
                let s = self.sellers.get_mut(agent).expect("role checked");
                s.listed_price = Some(*price);
                s.price_changes.push((round, *price));
                vec![MarketEffect::PriceListed { seller: agent.clone(), price: *price }]
            }
            (Role::Seller, Action::ConfirmSale { buyer, amount }) => {
                self.confirm_sale(agent, buyer, *amount, round)
            }
            (Role::Buyer, Action::Offer { receiver, amount }) => self.offer(agent, receiver, *amount, round),
            (Role::Buyer, Action::Accept { seller, amount }) => self.accept(agent, seller, *amount, round),
            (role, other) => vec![self.anomaly(
                round,
                agent,
                AnomalyKind::RoleViolation,
                format!("{} is not available to a {role}", other.verb()),
            )],
        };
        Ok(effects)
    }

    fn anomaly(&mut self, round: u32, agent: &AgentId, kind: AnomalyKind, detail: String) -> MarketEffect {
        let event = AnomalyEvent { round, agent: agent.clone(), kind, detail };
        self.anomalies.push(event.clone());
        MarketEffect::Anomaly(event)
    }

    fn confirm_sale(&mut self, seller: &AgentId, buyer: &AgentId, price: Amount, round: u32) -> Vec<MarketEffect> {
        if seller == buyer {
            return vec![self.anomaly(round, seller, AnomalyKind::SelfSale, format!("confirmed a sale to itself at {price}"))];
        }
        let Some(b) = self.buyers.get(buyer) else {
            return vec![self.anomaly(
                round,
                seller,
                AnomalyKind::ConfirmToNonBuyer,
                format!("confirmed a sale to {buyer}, who is not a buyer"),
            )];
        };
        if let Some(p) = &b.purchase {
            let detail = format!("{buyer} already bought from {} at {}", p.seller, p.price);
            return vec![self.anomaly(round, seller, AnomalyKind::DoublePurchaseAttempt, detail)];
        }
        match b.outstanding_offers.get(seller) {
            Some(offer) if *offer >= price => {}
            Some(offer) => {
                let detail = format!("{buyer} offered {offer}, below the confirmed {price}");
                return vec![self.anomaly(round, seller, AnomalyKind::ConfirmWithoutOffer, detail)];
            }
            None => {
                let detail = format!("{buyer} has made no offer to {seller}");
                return vec![self.anomaly(round, seller, AnomalyKind::ConfirmWithoutOffer, detail)];
            }
        }
        let settlement = self.settle(seller, buyer, price, round);
        vec![
            MarketEffect::Settled(settlement),
            MarketEffect::Message {
                receiver: buyer.clone(),
                performative: Performative::Confirm,
                body: format!("SALE CONFIRMED {price}"),
            },
        ]
    }

    fn offer(&mut self, buyer: &AgentId, receiver: &AgentId, amount: Amount, round: u32) -> Vec<MarketEffect> {
        let b = self.buyers.get_mut(buyer).expect("role checked");
        if let Some(p) = &b.purchase {
            let detail = format!("offered {amount} to {receiver} after buying from {}", p.seller);
            return vec![self.anomaly(round, buyer, AnomalyKind::DoublePurchaseAttempt, detail)];
        }
        let message = MarketEffect::Message {
            receiver: receiver.clone(),
            performative: Performative::Propose,
            body: format!("OFFER {amount}"),
        };
        if !self.sellers.contains_key(receiver) {
            // still a message, just not a binding offer
            return vec![message];
        }
        b.outstanding_offers.insert(receiver.clone(), amount);
        vec![
            MarketEffect::OfferRecorded { buyer: buyer.clone(), seller: receiver.clone(), amount },
            message,
        ]
    }

    fn accept(&mut self, buyer: &AgentId, seller: &AgentId, price: Amount, round: u32) -> Vec<MarketEffect> {
        if let Some(p) = &self.buyers[buyer].purchase {
            let detail = format!("accepted {seller} at {price} after buying from {}", p.seller);
            return vec![self.anomaly(round, buyer, AnomalyKind::DoublePurchaseAttempt, detail)];
        }
        let listed = self.sellers.get(seller).map(|s| s.public_price_at(round));
        match listed {
            Some(Some(p)) if p == price => {}
            Some(Some(p)) => {
                let detail = format!("accepted {price} but {seller} lists {p}");
                return vec![self.anomaly(round, buyer, AnomalyKind::ConfirmWithoutOffer, detail)];
            }
            Some(None) => {
                let detail = format!("{seller} has no listed price");
                return vec![self.anomaly(round, buyer, AnomalyKind::ConfirmWithoutOffer, detail)];
            }
            None => {
                let detail = format!("{seller} is not a seller");
                return vec![self.anomaly(round, buyer, AnomalyKind::ConfirmWithoutOffer, detail)];
            }
        }
        let settlement = self.settle(seller, buyer, price, round);
        vec![
            MarketEffect::Settled(settlement),
            MarketEffect::Message {
                receiver: seller.clone(),
                performative: Performative::Confirm,
                body: format!("PURCHASE CONFIRMED {price}"),
            },
        ]
    }

    fn settle(&mut self, seller: &AgentId, buyer: &AgentId, price: Amount, round: u32) -> Settlement {
        let s = self.sellers.get_mut(seller).expect("seller exists");
        s.sales.push(Sale { buyer: buyer.clone(), price, round });
        s.revenue = s.revenue.checked_add(price).expect("revenue overflow");
        let b = self.buyers.get_mut(buyer).expect("buyer exists");
        b.purchase = Some(Purchase { seller: seller.clone(), price, round });
        let settlement = Settlement { seller: seller.clone(), buyer: buyer.clone(), price, round };
        self.settlements.push(settlement.clone());
        settlement
    }

    pub fn total_revenue(&self) -> Amount {
        Amount::from_cents(self.sellers.values().map(|s| s.revenue.cents()).sum())
    }

    pub fn total_spent(&self) -> Amount {
        Amount::from_cents(
            self.buyers
                .values()
                .filter_map(|b| b.purchase.as_ref())
                .map(|p| p.price.cents())
                .sum(),
        )
    }

    /// Double-entry check: every sale has exactly one matching purchase and
    /// the totals agree.
    pub fn check_consistency(&self) -> Result<(), MarketError> {
        let bad = |m: String| Err(MarketError::Inconsistent(m));
        let mut matched = 0usize;
        for (seller, s) in &self.sellers {
            let sum: u64 = s.sales.iter().map(|x| x.price.cents()).sum();
            if sum != s.revenue.cents() {
                return bad(format!("{seller} revenue {} != sum of sales", s.revenue));
            }
            for sale in &s.sales {
                let purchase = self.buyers.get(&sale.buyer).and_then(|b| b.purchase.as_ref());
                match purchase {
                    Some(p) if p.seller == *seller && p.price == sale.price && p.round == sale.round => matched += 1,
                    _ => return bad(format!("sale {seller}->{} has no matching purchase", sale.buyer)),
                }
            }
        }
        let purchases = self.buyers.values().filter(|b| b.purchase.is_some()).count();
        if purchases != matched {
            return bad(format!("{purchases} purchases but {matched} matching sales"));
        }
        if self.total_revenue() != self.total_spent() {
            return bad("revenue and spending totals differ".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Winner {
    pub agent: AgentId,
    pub amount: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SellerTotals {
    pub revenue: Amount,
    pub sales: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinnerReport {
    /// Highest revenue among sellers with at least one sale.
    pub seller: Option<Winner>,
    /// Lowest purchase price among buyers who bought.
    pub buyer: Option<Winner>,
    pub sellers: BTreeMap<AgentId, SellerTotals>,
    pub buyers: BTreeMap<AgentId, Option<Purchase>>,
}

/// Ties go to the byte-wise smallest agent id.
pub fn determine_winners(ledger: &Ledger) -> WinnerReport {
    let mut seller: Option<Winner> = None;
    for (id, s) in &ledger.sellers {
        if s.sales.is_empty() {
            continue;
        }
        if seller.as_ref().is_none_or(|w| s.revenue > w.amount) {
            seller = Some(Winner { agent: id.clone(), amount: s.revenue });
        }
    }
    let mut buyer: Option<Winner> = None;
    for (id, b) in &ledger.buyers {
        let Some(p) = &b.purchase else { continue };
        if buyer.as_ref().is_none_or(|w| p.price < w.amount) {
            buyer = Some(Winner { agent: id.clone(), amount: p.price });
        }
    }
    WinnerReport {
        seller,
        buyer,
        sellers: ledger
            .sellers
            .iter()
            .map(|(id, s)| (id.clone(), SellerTotals { revenue: s.revenue, sales: s.sales.len() }))
            .collect(),
        buyers: ledger.buyers.iter().map(|(id, b)| (id.clone(), b.purchase.clone())).collect(),
    }
}

/// Derives self-messaging from the accepted messages and merges it with the
/// settlement anomalies the ledger recorded. Sorted by round, then agent.
pub fn detect_anomalies<'a>(
    messages: impl IntoIterator<Item = &'a Message>,
    recorded: impl IntoIterator<Item = &'a AnomalyEvent>,
) -> Vec<AnomalyEvent> {
    let mut out: Vec<AnomalyEvent> = recorded
        .into_iter()
        .filter(|a| a.kind != AnomalyKind::SelfMessage)
        .cloned()
        .collect();
    out.extend(messages.into_iter().filter(|m| m.is_self_addressed()).map(self_message_anomaly));
    out.sort();
    out
}

pub fn self_message_anomaly(m: &Message) -> AnomalyEvent {
    AnomalyEvent {
        round: m.round_sent,
        agent: m.sender.clone(),
        kind: AnomalyKind::SelfMessage,
        detail: format!("sent itself a message ({}): {}", m.performative, crate::model::one_line(&m.body)),
    }
}
