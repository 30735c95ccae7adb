//! Shared vocabulary: agent identities, roles, currency, messages, the round
//! clock, and the line-oriented action grammar that turns model output into
//! something the Execute stage can apply.
//!
//! # Action grammar
//!
//! The first non-blank line of a model reply is the command. Verbs are
//! matched case-insensitively; agent names are case-sensitive. Every line
//! after the command line is kept as free-form rationale.
//!
//! | Verb           | Arguments           | Canonical form                 |
//! |----------------|---------------------|--------------------------------|
//! | `SET_PRICE`    | amount              | `SET_PRICE 20.00`              |
//! | `SEND`         | receiver, text      | `SEND Agent2 hello there`      |
//! | `OFFER`        | receiver, amount    | `OFFER Agent1 18.00`           |
//! | `QUERY_PRICE`  | receiver            | `QUERY_PRICE Agent1`           |
//! | `CONFIRM_SALE` | buyer, amount       | `CONFIRM_SALE Agent4 18.00`    |
//! | `ACCEPT`       | seller, amount      | `ACCEPT Agent1 20.00`          |
//! | `EXPLAIN`      | text                | `EXPLAIN waiting for offers`   |
//! | `NOOP`         |                     | `NOOP`                         |
//!
//! Amounts are decimal literals with at most two fractional digits and an
//! optional leading `$`; they are normalized to exactly two digits. Anything
//! that does not match degrades to `NOOP` with a diagnostic.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid agent id {0:?}: expected [A-Za-z0-9_-]+")]
    InvalidAgentId(String),
    #[error("invalid amount {0:?}")]
    InvalidAmount(String),
    #[error("amount {0} out of range 0.01..=1000000.00")]
    AmountOutOfRange(String),
    #[error("invalid role {0:?}")]
    InvalidRole(String),
    #[error("round clock requires 0 <= current <= total and total >= 1 (got {current}/{total})")]
    InvalidClock { current: u32, total: u32 },
}

/// Symbolic agent name, e.g. `Agent4`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AgentId(String);

impl AgentId {
    pub fn new(name: impl Into<String>) -> Result<Self, ModelError> {
        let name = name.into();
        if is_agent_token(&name) {
            Ok(AgentId(name))
        } else {
            Err(ModelError::InvalidAgentId(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn is_agent_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

// Byte order, not locale order.
impl Ord for AgentId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.as_bytes().cmp(other.0.as_bytes())
    }
}

impl PartialOrd for AgentId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for AgentId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentId::new(s)
    }
}

impl Serialize for AgentId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AgentId::new(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seller,
    Buyer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Seller => "seller",
            Role::Buyer => "buyer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "seller" => Ok(Role::Seller),
            "buyer" => Ok(Role::Buyer),
            _ => Err(ModelError::InvalidRole(s.to_string())),
        }
    }
}

/// Fixed-point currency in cents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Amount(u64);

impl Amount {
    pub const ZERO: Amount = Amount(0);
    pub const MIN_PRICE: Amount = Amount(1);
    pub const MAX_PRICE: Amount = Amount(100_000_000);

    pub const fn from_cents(cents: u64) -> Self {
        Amount(cents)
    }

    pub const fn cents(self) -> u64 {
        self.0
    }

    /// A value usable as a price, offer or settlement amount.
    pub fn price(cents: u64) -> Result<Self, ModelError> {
        let a = Amount(cents);
        if a.is_valid_price() {
            Ok(a)
        } else {
            Err(ModelError::AmountOutOfRange(a.to_string()))
        }
    }

    pub fn is_valid_price(self) -> bool {
        self >= Self::MIN_PRICE && self <= Self::MAX_PRICE
    }

    pub fn checked_add(self, other: Amount) -> Option<Amount> {
        self.0.checked_add(other.0).map(Amount)
    }

    /// Parses a currency literal: `18`, `17.5`, `$18.00`. At most two
    /// fractional digits; the result must be a valid price.
    pub fn parse_price(s: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::InvalidAmount(s.to_string());
        let digits = s.strip_prefix('$').unwrap_or(s);
        let (whole, frac) = match digits.split_once('.') {
            Some((w, f)) => (w, Some(f)),
            None => (digits, None),
        };
        // long digit runs cannot be in range; reject before the multiply
        if whole.is_empty() || whole.len() > 9 || !whole.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let frac_cents = match frac {
            None => 0,
            Some(f) if (1..=2).contains(&f.len()) && f.bytes().all(|b| b.is_ascii_digit()) => {
                let v: u64 = f.parse().map_err(|_| bad())?;
                if f.len() == 1 {
                    v * 10
                } else {
                    v
                }
            }
            Some(_) => return Err(bad()),
        };
        let whole: u64 = whole.parse().map_err(|_| bad())?;
        Amount::price(whole * 100 + frac_cents)
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Amount {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Amount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        // totals can exceed a single price, so parse loosely here
        match s.split_once('.') {
            Some((w, f)) if f.len() == 2 => {
                let w: u64 = w.parse().map_err(serde::de::Error::custom)?;
                let f: u64 = f.parse().map_err(serde::de::Error::custom)?;
                Ok(Amount(w * 100 + f))
            }
            _ => Err(serde::de::Error::custom(format!("invalid amount {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Performative {
    Inform,
    Propose,
    Query,
    Confirm,
}

impl Performative {
    pub fn as_str(self) -> &'static str {
        match self {
            Performative::Inform => "inform",
            Performative::Propose => "propose",
            Performative::Query => "query",
            Performative::Confirm => "confirm",
        }
    }
}

impl fmt::Display for Performative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A message between agents. Self-addressed messages are legal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub sender: AgentId,
    pub receiver: AgentId,
    pub performative: Performative,
    pub body: String,
    pub round_sent: u32,
    pub seq: u64,
}

impl Message {
    pub fn is_self_addressed(&self) -> bool {
        self.sender == self.receiver
    }

    /// Canonical delivery order: round, then sender, then seq.
    pub fn delivery_key(&self) -> (u32, &AgentId, u64) {
        (self.round_sent, &self.sender, self.seq)
    }

    /// One-line rendering used in prompts and history.
    pub fn render(&self) -> String {
        format!(
            "{} -> {} [{}]: {}",
            self.sender,
            self.receiver,
            self.performative,
            one_line(&self.body)
        )
    }
}

/// Collapses line breaks so a body can sit on one prompt line.
pub fn one_line(text: &str) -> String {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" / ")
}

/// Zero-based round counter; `current == total` is the post-run phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundClock {
    current: u32,
    total: u32,
}

impl RoundClock {
    pub fn new(current: u32, total: u32) -> Result<Self, ModelError> {
        if total == 0 || current > total {
            return Err(ModelError::InvalidClock { current, total });
        }
        Ok(RoundClock { current, total })
    }

    pub fn current(&self) -> u32 {
        self.current
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn is_final_round(&self) -> bool {
        self.current + 1 == self.total
    }

    pub fn in_explanation_phase(&self) -> bool {
        self.current == self.total
    }

    /// `Iteration k of N`, one-based.
    pub fn banner(&self) -> String {
        format!("Iteration {} of {}", self.current + 1, self.total)
    }

    pub fn advance(&mut self) {
        if self.current < self.total {
            self.current += 1;
        }
    }
}

/// What an agent decided to do this round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    SetPrice(Amount),
    Send { receiver: AgentId, text: String },
    Offer { receiver: AgentId, amount: Amount },
    QueryPrice(AgentId),
    ConfirmSale { buyer: AgentId, amount: Amount },
    Accept { seller: AgentId, amount: Amount },
    Explain(String),
    Noop,
}

impl Action {
    pub fn verb(&self) -> &'static str {
        match self {
            Action::SetPrice(_) => "SET_PRICE",
            Action::Send { .. } => "SEND",
            Action::Offer { .. } => "OFFER",
            Action::QueryPrice(_) => "QUERY_PRICE",
            Action::ConfirmSale { .. } => "CONFIRM_SALE",
            Action::Accept { .. } => "ACCEPT",
            Action::Explain(_) => "EXPLAIN",
            Action::Noop => "NOOP",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::SetPrice(a) => write!(f, "SET_PRICE {a}"),
            Action::Send { receiver, text } => write!(f, "SEND {receiver} {text}"),
            Action::Offer { receiver, amount } => write!(f, "OFFER {receiver} {amount}"),
            Action::QueryPrice(r) => write!(f, "QUERY_PRICE {r}"),
            Action::ConfirmSale { buyer, amount } => write!(f, "CONFIRM_SALE {buyer} {amount}"),
            Action::Accept { seller, amount } => write!(f, "ACCEPT {seller} {amount}"),
            Action::Explain(t) => write!(f, "EXPLAIN {t}"),
            Action::Noop => f.write_str("NOOP"),
        }
    }
}

/// Parsed model output, with the verbatim text it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionCommand {
    pub action: Action,
    pub rationale: Option<String>,
    pub raw: String,
    /// Why the output degraded to `Noop`, when it did.
    pub diagnostic: Option<String>,
}

impl ActionCommand {
    pub fn noop(raw: impl Into<String>, diagnostic: impl Into<String>) -> Self {
        ActionCommand {
            action: Action::Noop,
            rationale: None,
            raw: raw.into(),
            diagnostic: Some(diagnostic.into()),
        }
    }

    pub fn is_noop(&self) -> bool {
        self.action == Action::Noop
    }
}

/// Canonical single-line rendering of a command.
pub fn render_action(cmd: &ActionCommand) -> String {
    cmd.action.to_string()
}

/// Translates model output into a command. Never fails: malformed input
/// yields `Noop` with `raw` preserved and a diagnostic.
pub fn parse_action(text: &str) -> ActionCommand {
    let mut lines = text.split('\n');
    let command_line = loop {
        match lines.next() {
            None => return ActionCommand::noop(text, "empty output"),
            Some(l) if l.trim().is_empty() => continue,
            Some(l) => break l.trim(),
        }
    };
    let rest: Vec<&str> = lines.map(|l| l.trim_end_matches('\r')).collect();
    let rationale = {
        let joined = rest.join("\n");
        let trimmed = joined.trim();
        (!trimmed.is_empty()).then(|| trimmed.to_string())
    };

    match parse_command_line(command_line) {
        Ok(action) => ActionCommand {
            action,
            rationale,
            raw: text.to_string(),
            diagnostic: None,
        },
        Err(reason) => ActionCommand::noop(text, reason),
    }
}

fn split_token(s: &str) -> (&str, &str) {
    let s = s.trim_start();
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim_start()),
        None => (s, ""),
    }
}

fn parse_command_line(line: &str) -> Result<Action, String> {
    let (verb, args) = split_token(line);
    let verb = verb.to_ascii_uppercase();

    let agent = |tok: &str| -> Result<AgentId, String> {
        if tok.is_empty() {
            return Err("missing argument".into());
        }
        AgentId::new(tok).map_err(|_| format!("invalid agent id {tok:?}"))
    };
    let amount = |tok: &str| -> Result<Amount, String> {
        if tok.is_empty() {
            return Err("missing argument".into());
        }
        Amount::parse_price(tok).map_err(|e| e.to_string())
    };
    let no_more = |rest: &str| -> Result<(), String> {
        if rest.is_empty() {
            Ok(())
        } else {
            Err(format!("unexpected argument {rest:?}"))
        }
    };
    let text = |rest: &str| -> Result<String, String> {
        if rest.is_empty() {
            Err("missing argument".into())
        } else {
            Ok(rest.to_string())
        }
    };

    match verb.as_str() {
        "SET_PRICE" => {
            let (a, rest) = split_token(args);
            let a = amount(a)?;
            no_more(rest)?;
            Ok(Action::SetPrice(a))
        }
        "SEND" => {
            let (r, rest) = split_token(args);
            let receiver = agent(r)?;
            Ok(Action::Send { receiver, text: text(rest)? })
        }
        "OFFER" | "CONFIRM_SALE" | "ACCEPT" => {
            let (r, rest) = split_token(args);
            let who = agent(r)?;
            let (a, rest) = split_token(rest);
            let a = amount(a)?;
            no_more(rest)?;
            Ok(match verb.as_str() {
                "OFFER" => Action::Offer { receiver: who, amount: a },
                "CONFIRM_SALE" => Action::ConfirmSale { buyer: who, amount: a },
                _ => Action::Accept { seller: who, amount: a },
            })
        }
        "QUERY_PRICE" => {
            let (r, rest) = split_token(args);
            let who = agent(r)?;
            no_more(rest)?;
            Ok(Action::QueryPrice(who))
        }
        "EXPLAIN" => Ok(Action::Explain(text(args)?)),
        "NOOP" => {
            no_more(args)?;
            Ok(Action::Noop)
        }
        _ => Err("unrecognized verb".into()),
    }
}

/// The instruction block appended to every prompt.
pub const GRAMMAR_INSTRUCTIONS: &str = "\
Reply with exactly one command on the first line, then optionally a short rationale on the following lines.
Commands (amounts use two decimals, agent names are case-sensitive):
  SET_PRICE <amount>               (sellers) publish your price
  OFFER <seller> <amount>          (buyers) make an offer to a seller
  ACCEPT <seller> <amount>         (buyers) buy at the seller's listed price
  CONFIRM_SALE <buyer> <amount>    (sellers) sell to a buyer who offered at least <amount>
  QUERY_PRICE <agent>              ask an agent for their price
  SEND <agent> <text>              send a free-text message
  EXPLAIN <text>                   record your reasoning without acting
  NOOP                             do nothing this iteration";
