//! Round-synchronized message bus and the public agent directory.
//!
//! Messages sent in round `k` become readable in round `k + 1`, in the
//! canonical order (round sent, sender id, sender seq). Seller prices set in
//! round `k` likewise become public only once the bus advances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, Amount, Message, Performative, Role};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("agent {0} is already registered")]
    DuplicateAgent(AgentId),
    #[error("unknown sender {0}")]
    UnknownSender(AgentId),
    #[error("unknown receiver {0}; message dropped")]
    UnknownReceiver(AgentId),
    #[error("message stamped for round {sent} but the bus is at round {current}")]
    StaleRound { sent: u32, current: u32 },
    #[error("message body is empty")]
    EmptyBody,
    #[error("seq {seq} from {sender} is not above the last seq used")]
    NonMonotonicSeq { sender: AgentId, seq: u64 },
    #[error("requested round {requested} but the bus is at round {current}")]
    WrongRound { requested: u32, current: u32 },
    #[error("{0} is not a seller")]
    NotASeller(AgentId),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub agent: AgentId,
    pub role: Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub listed_price: Option<Amount>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BusEvent {
    Accepted { message: Message, self_addressed: bool },
    Dropped { message: Message, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryAck {
    pub deliver_at: u32,
    pub self_addressed: bool,
}

#[derive(Debug, Clone)]
struct Registration {
    role: Role,
    visible_price: Option<Amount>,
    staged_price: Option<Amount>,
    // next seq this agent may use
    next_seq: u64,
}

/// Owned by the round driver. Cross-agent effects are applied through
/// `&mut self` at the round barrier, so two runs fed the same sends produce
/// identical inboxes.
#[derive(Debug, Clone, Default)]
pub struct MessageBus {
    round: u32,
    agents: BTreeMap<AgentId, Registration>,
    in_flight: Vec<Message>,
    mailboxes: BTreeMap<AgentId, Vec<Message>>,
    events: Vec<BusEvent>,
    accepted: u64,
    delivered: u64,
}

impl MessageBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, agent: AgentId, role: Role) -> Result<(), BusError> {
        if self.agents.contains_key(&agent) {
            return Err(BusError::DuplicateAgent(agent));
        }
        self.agents.insert(
            agent,
            Registration { role, visible_price: None, staged_price: None, next_seq: 0 },
        );
        Ok(())
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn is_registered(&self, agent: &AgentId) -> bool {
        self.agents.contains_key(agent)
    }

    pub fn role_of(&self, agent: &AgentId) -> Option<Role> {
        self.agents.get(agent).map(|r| r.role)
    }

    /// Stamps a message with the current round and the sender's next seq,
    /// then sends it.
    pub fn post(
        &mut self,
        sender: &AgentId,
        receiver: &AgentId,
        performative: Performative,
        body: impl Into<String>,
    ) -> Result<(Message, DeliveryAck), BusError> {
        let seq = self
            .agents
            .get(sender)
            .ok_or_else(|| BusError::UnknownSender(sender.clone()))?
            .next_seq;
        let msg = Message {
            sender: sender.clone(),
            receiver: receiver.clone(),
            performative,
            body: body.into(),
            round_sent: self.round,
            seq,
        };
        let ack = self.send(msg.clone())?;
        Ok((msg, ack))
    }

    /// Queues `msg` for delivery next round. An unknown receiver drops the
    /// message and logs it; the seq is still consumed.
    pub fn send(&mut self, msg: Message) -> Result<DeliveryAck, BusError> {
        if msg.round_sent != self.round {
            return Err(BusError::StaleRound { sent: msg.round_sent, current: self.round });
        }
        if msg.body.trim().is_empty() {
            return Err(BusError::EmptyBody);
        }
        let reg = self
            .agents
            .get_mut(&msg.sender)
            .ok_or_else(|| BusError::UnknownSender(msg.sender.clone()))?;
        if msg.seq < reg.next_seq {
            return Err(BusError::NonMonotonicSeq { sender: msg.sender.clone(), seq: msg.seq });
        }
        reg.next_seq = msg.seq + 1;

        if !self.agents.contains_key(&msg.receiver) {
            let err = BusError::UnknownReceiver(msg.receiver.clone());
            self.events.push(BusEvent::Dropped { message: msg, reason: "unknown receiver".into() });
            return Err(err);
        }
        let self_addressed = msg.is_self_addressed();
        self.events.push(BusEvent::Accepted { message: msg.clone(), self_addressed });
        self.in_flight.push(msg);
        self.accepted += 1;
        Ok(DeliveryAck { deliver_at: self.round + 1, self_addressed })
    }

    /// Drains the agent's inbox for `round`: everything sent to it in
    /// `round - 1`. A second call in the same round returns nothing.
    pub fn collect_inbox(&mut self, agent: &AgentId, round: u32) -> Result<Vec<Message>, BusError> {
        if round != self.round {
            return Err(BusError::WrongRound { requested: round, current: self.round });
        }
        let inbox = self.mailboxes.remove(agent).unwrap_or_default();
        self.delivered += inbox.len() as u64;
        Ok(inbox)
    }

    /// Stages a seller's new public price; visible after the next advance.
    pub fn set_price(&mut self, agent: &AgentId, price: Amount) -> Result<(), BusError> {
        let reg = self
            .agents
            .get_mut(agent)
            .ok_or_else(|| BusError::UnknownAgent(agent.clone()))?;
        if reg.role != Role::Seller {
            return Err(BusError::NotASeller(agent.clone()));
        }
        reg.staged_price = Some(price);
        Ok(())
    }

    /// Sorted by agent id; prices as of the end of the previous round.
    pub fn directory_snapshot(&self) -> Vec<DirectoryEntry> {
        self.agents
            .iter()
            .map(|(agent, reg)| DirectoryEntry {
                agent: agent.clone(),
                role: reg.role,
                listed_price: reg.visible_price,
            })
            .collect()
    }

    /// Closes the current round: publishes staged prices and moves this
    /// round's messages into next round's mailboxes. Returns any messages
    /// that were deliverable this round but never collected.
    pub fn advance_round(&mut self) -> Vec<Message> {
        let expired: Vec<Message> =
            std::mem::take(&mut self.mailboxes).into_values().flatten().collect();
        for reg in self.agents.values_mut() {
            if let Some(p) = reg.staged_price.take() {
                reg.visible_price = Some(p);
            }
        }
        let mut sent = std::mem::take(&mut self.in_flight);
        sent.sort_by(|a, b| a.delivery_key().cmp(&b.delivery_key()));
        for msg in sent {
            self.mailboxes.entry(msg.receiver.clone()).or_default().push(msg);
        }
        self.round += 1;
        expired
    }

    pub fn drain_events(&mut self) -> Vec<BusEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn accepted_count(&self) -> u64 {
        self.accepted
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }

    /// Messages accepted but not yet collected.
    pub fn pending_count(&self) -> usize {
        self.in_flight.len() + self.mailboxes.values().map(Vec::len).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(s: &str) -> AgentId {
        AgentId::new(s).unwrap()
    }

    fn market() -> MessageBus {
        let mut bus = MessageBus::new();
        for s in ["Agent1", "Agent2", "Agent3"] {
            bus.register(id(s), Role::Seller).unwrap();
        }
        for b in ["Agent4", "Agent5"] {
            bus.register(id(b), Role::Buyer).unwrap();
        }
        bus
    }

    fn advance_to(bus: &mut MessageBus, round: u32) {
        while bus.round() < round {
            bus.advance_round();
        }
    }

    #[test]
    fn query_arrives_next_round() {
        let mut bus = market();
        advance_to(&mut bus, 2);
        let (_, ack) = bus
            .post(&id("Agent5"), &id("Agent1"), Performative::Query, "what is your price")
            .unwrap();
        assert_eq!(ack.deliver_at, 3);
        assert!(bus.collect_inbox(&id("Agent1"), 2).unwrap().is_empty());
        bus.advance_round();
        let inbox = bus.collect_inbox(&id("Agent1"), 3).unwrap();
        assert_eq!(inbox.len(), 1);
        assert_eq!(inbox[0].body, "what is your price");
        assert_eq!(inbox[0].round_sent, 2);
    }

    #[test]
    fn self_messages_are_flagged_and_delivered() {
        let mut bus = market();
        let (_, ack) = bus.post(&id("Agent2"), &id("Agent2"), Performative::Propose, "I'll buy it").unwrap();
        assert!(ack.self_addressed);
        match &bus.drain_events()[..] {
            [BusEvent::Accepted { self_addressed: true, .. }] => {}
            other => panic!("{other:?}"),
        }
        bus.advance_round();
        assert_eq!(bus.collect_inbox(&id("Agent2"), 1).unwrap().len(), 1);
    }

    #[test]
    fn unknown_receiver_is_dropped_and_logged() {
        let mut bus = market();
        let err = bus.post(&id("Agent4"), &id("Ghost"), Performative::Inform, "hello").unwrap_err();
        assert_eq!(err, BusError::UnknownReceiver(id("Ghost")));
        assert_eq!(bus.accepted_count(), 0);
        assert_eq!(bus.pending_count(), 0);
        assert!(matches!(&bus.drain_events()[..], [BusEvent::Dropped { .. }]));
    }

    #[test]
    fn stale_rounds_and_bad_bodies_are_rejected() {
        let mut bus = market();
        bus.advance_round();
        let msg = Message {
            sender: id("Agent4"),
            receiver: id("Agent1"),
            performative: Performative::Inform,
            body: "hi".into(),
            round_sent: 0,
            seq: 0,
        };
        assert_eq!(bus.send(msg.clone()), Err(BusError::StaleRound { sent: 0, current: 1 }));
        let empty = Message { round_sent: 1, body: "  ".into(), ..msg.clone() };
        assert_eq!(bus.send(empty), Err(BusError::EmptyBody));
        let ok = Message { round_sent: 1, seq: 5, ..msg.clone() };
        bus.send(ok).unwrap();
        let replay = Message { round_sent: 1, seq: 5, ..msg };
        assert!(matches!(bus.send(replay), Err(BusError::NonMonotonicSeq { .. })));
    }

    #[test]
    fn round_zero_inboxes_are_empty_and_collection_is_exactly_once() {
        let mut bus = market();
        for e in bus.directory_snapshot() {
            assert!(bus.collect_inbox(&e.agent, 0).unwrap().is_empty());
        }
        bus.post(&id("Agent4"), &id("Agent1"), Performative::Propose, "OFFER 18.00").unwrap();
        bus.advance_round();
        assert_eq!(bus.collect_inbox(&id("Agent1"), 1).unwrap().len(), 1);
        assert!(bus.collect_inbox(&id("Agent1"), 1).unwrap().is_empty());
        assert_eq!(bus.delivered_count(), 1);
        assert_eq!(
            bus.collect_inbox(&id("Agent1"), 0),
            Err(BusError::WrongRound { requested: 0, current: 1 })
        );
    }

    #[test]
    fn inbox_order_is_sender_then_seq() {
        let mut bus = market();
        bus.post(&id("Agent5"), &id("Agent1"), Performative::Propose, "b1").unwrap();
        bus.post(&id("Agent4"), &id("Agent1"), Performative::Propose, "a1").unwrap();
        bus.post(&id("Agent5"), &id("Agent1"), Performative::Query, "b2").unwrap();
        bus.post(&id("Agent4"), &id("Agent1"), Performative::Query, "a2").unwrap();
        bus.advance_round();
        let bodies: Vec<_> = bus
            .collect_inbox(&id("Agent1"), 1)
            .unwrap()
            .into_iter()
            .map(|m| m.body)
            .collect();
        assert_eq!(bodies, ["a1", "a2", "b1", "b2"]);
    }

    #[test]
    fn directory_shows_three_prices_after_the_round() {
        let mut bus = market();
        assert!(bus.directory_snapshot().iter().all(|e| e.listed_price.is_none()));
        bus.set_price(&id("Agent1"), Amount::from_cents(2000)).unwrap();
        bus.set_price(&id("Agent2"), Amount::from_cents(2200)).unwrap();
        bus.set_price(&id("Agent3"), Amount::from_cents(2500)).unwrap();
        // same-round snapshot still shows nothing
        assert!(bus.directory_snapshot().iter().all(|e| e.listed_price.is_none()));
        bus.advance_round();
        let snap = bus.directory_snapshot();
        let cheapest = snap
            .iter()
            .filter_map(|e| e.listed_price.map(|p| (p, e.agent.clone())))
            .min()
            .unwrap();
        assert_eq!(cheapest, (Amount::from_cents(2000), id("Agent1")));
        assert_eq!(snap.iter().filter(|e| e.listed_price.is_some()).count(), 3);
        assert_eq!(bus.set_price(&id("Agent4"), Amount::from_cents(1)), Err(BusError::NotASeller(id("Agent4"))));
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut bus = market();
        assert_eq!(bus.register(id("Agent1"), Role::Buyer), Err(BusError::DuplicateAgent(id("Agent1"))));
    }

    proptest! {
        #[test]
        fn every_accepted_message_is_delivered_once_in_order(
            sends in proptest::collection::vec((0usize..4, 0usize..5, 0u32..4), 0..60)
        ) {
            let names = ["A", "B", "C", "D"];
            let mut bus = MessageBus::new();
            for n in names {
                bus.register(id(n), Role::Buyer).unwrap();
            }
            let mut by_round: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 4];
            for (from, to, round) in sends {
                by_round[round as usize].push((from, to));
            }
            let mut accepted = Vec::new();
            let mut delivered = Vec::new();
            for (round, batch) in by_round.iter().enumerate() {
                for n in names {
                    let inbox = bus.collect_inbox(&id(n), round as u32).unwrap();
                    let keys: Vec<_> = inbox.iter().map(Message::delivery_key).collect();
                    prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(inbox.iter().all(|m| m.round_sent + 1 == round as u32));
                    delivered.extend(inbox);
                }
                for &(from, to) in batch {
                    // index 4 is an unregistered receiver
                    let receiver = names.get(to).map_or_else(|| id("Nobody"), |n| id(n));
                    if let Ok((m, _)) = bus.post(&id(names[from]), &receiver, Performative::Inform, "x") {
                        accepted.push(m);
                    }
                }
                bus.advance_round();
            }
            for n in names {
                delivered.extend(bus.collect_inbox(&id(n), 4).unwrap());
            }
            let key = |m: &Message| (m.sender.clone(), m.seq);
            let mut a: Vec<_> = accepted.iter().map(key).collect();
            let mut d: Vec<_> = delivered.iter().map(key).collect();
            a.sort();
            d.sort();
            prop_assert_eq!(a, d);
            prop_assert_eq!(bus.accepted_count(), bus.delivered_count());
        }
    }
}
