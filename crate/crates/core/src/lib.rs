//! A multi-agent marketplace where every agent runs a monitor, analyze,
//! plan, execute loop around a language model.
//!
//! Agents exchange messages over a lockstep bus: anything sent in round
//! `k` is delivered at the start of round `k + 1`. Within a round all
//! agents plan concurrently (with the `parallel` feature) against the same
//! snapshot, and their commands are applied afterwards in agent-id order,
//! so runs are deterministic whatever the scheduling.

pub mod knowledge;
pub mod llm;
pub mod mapek;
pub mod marketplace;
pub mod messaging;
pub mod model;
pub mod sim;

pub use model::{Action, ActionCommand, AgentId, Amount, Message, Performative, Role, RoundClock};
