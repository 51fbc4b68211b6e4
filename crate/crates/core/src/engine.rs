//! One negotiation episode: greeting, alternating seller/buyer turns, price
//! extraction and judgment each round, termination and final outcome.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    extract_price, AgentError, AgentView, Analyst, Decision, Judge, Participant, PublicProduct,
    Side, Utterance, WireEntry,
};
use crate::catalog::{BudgetLevel, Category, Product};
use crate::money::Money;

pub const DEFAULT_T_MAX: u32 = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct NegotiationConfig {
    pub t_max: u32,
    pub budget: Money,
    pub product: Product,
    pub record_wire: bool,
}

impl NegotiationConfig {
    pub fn new(product: Product, budget: Money) -> Self {
        NegotiationConfig {
            t_max: DEFAULT_T_MAX,
            budget,
            product,
            record_wire: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    #[default]
    Wall,
    /// Timestamps are turn counters, so identical runs give identical bytes.
    Logical,
}

/// Identifiers and bookkeeping carried into the transcript record.
#[derive(Debug, Clone, Default)]
pub struct EpisodeMeta {
    pub run_id: String,
    pub job_id: String,
    pub budget_level: Option<BudgetLevel>,
    pub seed: u64,
    pub clock: Clock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub round: u32,
    pub speaker: Side,
    pub text: String,
    /// Analyst price for seller turns; rule-based extraction for buyer turns.
    pub extracted_price: Option<Money>,
    /// Judge verdict, present on buyer turns after the greeting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<Decision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flags {
    pub over_budget: bool,
    pub below_wholesale: bool,
    pub over_retail: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub decision: Verdict,
    pub final_price: Option<Money>,
    pub rounds_used: u32,
    pub deadlock: bool,
    /// Every seller offer the analyst extracted, with its round.
    pub trajectory: Vec<(u32, Money)>,
    pub flags: Flags,
    /// The buyer accepted before any seller price was ever stated; recorded
    /// as a rejection.
    #[serde(default)]
    pub accepted_without_offer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub started_at: u64,
    pub finished_at: u64,
}

/// One JSONL record per negotiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub run_id: String,
    pub job_id: String,
    pub product_name: String,
    #[serde(default)]
    pub category: Category,
    pub budget_level: Option<BudgetLevel>,
    pub beta: Money,
    pub retail_price: Money,
    pub wholesale_price: Money,
    pub buyer_model: String,
    pub seller_model: String,
    pub t_max: u32,
    pub turns: Vec<Turn>,
    pub status: Status,
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    pub timestamps: Timing,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wire: Vec<WireEntry>,
}

impl Transcript {
    pub fn accepted(&self) -> bool {
        matches!(&self.outcome, Some(o) if o.decision == Verdict::Accept)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("negotiation has not terminated")]
    IllegalState,
}

#[derive(Debug, Error)]
pub enum NegotiationErrorKind {
    #[error("agent failure: {0}")]
    AgentFailure(#[from] AgentError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Failure mid-episode; `transcript` holds the partial turns, status aborted.
#[derive(Debug, Error)]
#[error("{kind}")]
pub struct NegotiationError {
    pub kind: NegotiationErrorKind,
    pub transcript: Box<Transcript>,
}

/// Mutable episode state, advanced turn by turn.
#[derive(Debug, Clone)]
pub struct NegotiationState {
    pub config: NegotiationConfig,
    pub turns: Vec<Turn>,
    pub history: Vec<Utterance>,
    pub trajectory: Vec<(u32, Money)>,
    pub buyer_offers: Vec<Money>,
    terminal: Option<(Verdict, u32, bool)>,
    accepted_without_offer: bool,
}

impl NegotiationState {
    pub fn new(config: NegotiationConfig) -> Self {
        NegotiationState {
            config,
            turns: Vec::new(),
            history: Vec::new(),
            trajectory: Vec::new(),
            buyer_offers: Vec::new(),
            terminal: None,
            accepted_without_offer: false,
        }
    }

    pub fn standing_offer(&self) -> Option<Money> {
        self.trajectory.last().map(|(_, p)| *p)
    }

    pub fn seller_offers(&self) -> Vec<Money> {
        self.trajectory.iter().map(|(_, p)| *p).collect()
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    fn push(&mut self, turn: Turn) {
        self.history.push(Utterance {
            speaker: turn.speaker,
            text: turn.text.clone(),
        });
        self.turns.push(turn);
    }

    pub fn record_greeting(&mut self, text: String) {
        let price = extract_price(&text);
        self.buyer_offers.extend(price);
        self.push(Turn {
            round: 1,
            speaker: Side::Buyer,
            text,
            extracted_price: price,
            judge: None,
        });
    }

    pub fn record_seller(&mut self, round: u32, text: String, price: Option<Money>) {
        if let Some(p) = price {
            self.trajectory.push((round, p));
        }
        self.push(Turn {
            round,
            speaker: Side::Seller,
            text,
            extracted_price: price,
            judge: None,
        });
    }

    /// Record the buyer's reply and the judge's verdict, terminating the
    /// episode when the verdict or the round limit says so.
    pub fn record_buyer(&mut self, round: u32, text: String, decision: Decision) {
        let price = extract_price(&text);
        self.buyer_offers.extend(price);
        self.push(Turn {
            round,
            speaker: Side::Buyer,
            text,
            extracted_price: price,
            judge: Some(decision),
        });
        self.terminal = match decision {
            Decision::Acceptance if self.standing_offer().is_some() => {
                Some((Verdict::Accept, round, false))
            }
            Decision::Acceptance => {
                self.accepted_without_offer = true;
                Some((Verdict::Reject, round, false))
            }
            Decision::Rejection => Some((Verdict::Reject, round, false)),
            Decision::Continue if round >= self.config.t_max => {
                Some((Verdict::Reject, round, true))
            }
            Decision::Continue => None,
        };
    }

    pub fn finalize(&self) -> Result<Outcome, EngineError> {
        let (decision, rounds_used, deadlock) = self.terminal.ok_or(EngineError::IllegalState)?;
        let final_price = match decision {
            Verdict::Accept => self.standing_offer(),
            Verdict::Reject => None,
        };
        let c = &self.config;
        let flags = match final_price {
            Some(p) => Flags {
                over_budget: p > c.budget,
                below_wholesale: p < c.product.wholesale_price,
                over_retail: p > c.product.retail_price,
            },
            None => Flags::default(),
        };
        Ok(Outcome {
            decision,
            final_price,
            rounds_used,
            deadlock,
            trajectory: self.trajectory.clone(),
            flags,
            accepted_without_offer: self.accepted_without_offer,
        })
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Run one episode to completion.
pub fn run_negotiation(
    buyer: &mut dyn Participant,
    seller: &mut dyn Participant,
    judge: &dyn Judge,
    analyst: &dyn Analyst,
    config: &NegotiationConfig,
    meta: &EpisodeMeta,
) -> Result<Transcript, NegotiationError> {
    let started_at = match meta.clock {
        Clock::Wall => now_ms(),
        Clock::Logical => 0,
    };
    let mut state = NegotiationState::new(config.clone());
    let result = drive(buyer, seller, judge, analyst, &mut state);
    let finished_at = match meta.clock {
        Clock::Wall => now_ms(),
        Clock::Logical => state.turns.len() as u64,
    };
    let p = &config.product;
    let mut transcript = Transcript {
        run_id: meta.run_id.clone(),
        job_id: meta.job_id.clone(),
        product_name: p.name.clone(),
        category: p.category,
        budget_level: meta.budget_level,
        beta: config.budget,
        retail_price: p.retail_price,
        wholesale_price: p.wholesale_price,
        buyer_model: buyer.id().to_string(),
        seller_model: seller.id().to_string(),
        t_max: config.t_max,
        turns: state.turns.clone(),
        status: Status::Completed,
        outcome: None,
        error: None,
        seed: meta.seed,
        timestamps: Timing {
            started_at,
            finished_at,
        },
        wire: Vec::new(),
    };
    match result {
        Ok(()) => {
            transcript.outcome = Some(state.finalize().expect("driver stops only when terminal"));
            Ok(transcript)
        }
        Err(kind) => {
            transcript.status = Status::Aborted;
            transcript.error = Some(kind.to_string());
            Err(NegotiationError {
                kind,
                transcript: Box::new(transcript),
            })
        }
    }
}

fn nonempty(side: Side, text: String) -> Result<String, NegotiationErrorKind> {
    if text.trim().is_empty() {
        Err(NegotiationErrorKind::Protocol(format!("empty {side:?} utterance")))
    } else {
        Ok(text)
    }
}

fn drive(
    buyer: &mut dyn Participant,
    seller: &mut dyn Participant,
    judge: &dyn Judge,
    analyst: &dyn Analyst,
    state: &mut NegotiationState,
) -> Result<(), NegotiationErrorKind> {
    let c = state.config.clone();
    if c.t_max == 0 {
        return Err(NegotiationErrorKind::Protocol("t_max must be at least 1".into()));
    }
    let public = PublicProduct::from(&c.product);
    let greeting = buyer.speak(&AgentView {
        side: Side::Buyer,
        product: &public,
        private_limit: c.budget,
        history: &[],
        opponent_offers: &[],
        round: 1,
    })?;
    state.record_greeting(nonempty(Side::Buyer, greeting)?);

    for round in 1..=c.t_max {
        let seller_text = seller.speak(&AgentView {
            side: Side::Seller,
            product: &public,
            private_limit: c.product.wholesale_price,
            history: &state.history,
            opponent_offers: &state.buyer_offers,
            round,
        })?;
        let seller_text = nonempty(Side::Seller, seller_text)?;
        let price = analyst.extract(&seller_text)?;
        state.record_seller(round, seller_text.clone(), price);

        let seller_offers = state.seller_offers();
        let buyer_text = buyer.speak(&AgentView {
            side: Side::Buyer,
            product: &public,
            private_limit: c.budget,
            history: &state.history,
            opponent_offers: &seller_offers,
            round,
        })?;
        let buyer_text = nonempty(Side::Buyer, buyer_text)?;
        let decision = judge.classify(&buyer_text, Some(&seller_text))?;
        state.record_buyer(round, buyer_text, decision);
        if state.is_terminal() {
            return Ok(());
        }
    }
    unreachable!("record_buyer terminates at t_max")
}
