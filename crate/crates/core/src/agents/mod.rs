//! Negotiation participants: buyer, seller, judge and analyst.
//!
//! Every behavior has a remote chat-model backend ([`remote`]) and a
//! deterministic local one ([`scripted`], [`judge`], [`extract`]). The engine
//! only sees the traits below.

pub mod extract;
pub mod judge;
pub mod remote;
pub mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::catalog::PublicProduct;
use crate::catalog::Product;
use crate::money::Money;

pub use extract::{extract_price, parse_analyst_reply, RuleAnalyst};
pub use judge::{classify_decision, parse_judge_reply, RuleJudge};
pub use remote::{
    chat_complete, AgentEndpoint, ChatClient, Completion, RateLimiter, RemoteAnalyst,
    RemoteJudge, RemoteParticipant, WireEntry, WireLog,
};
pub use scripted::{scripted_step, ScriptedParticipant, ScriptedPolicy, StallExit, StepOutput};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {retries} retries")]
    RateLimited { retries: u32 },
    #[error("transport error after {retries} retries: {message}")]
    Transport { message: String, retries: u32 },
    #[error("model returned an empty completion")]
    EmptyCompletion,
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("invalid chat history: {0}")]
    History(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// Judge verdict on the buyer's latest message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Acceptance,
    Rejection,
    Continue,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Acceptance => "ACCEPTANCE",
            Decision::Rejection => "REJECTION",
            Decision::Continue => "CONTINUE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buyer,
    Seller,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Side,
    pub text: String,
}

/// What one side may see when it speaks. The buyer's private limit is its
/// budget; the seller's is the wholesale price. Neither sees the other's.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub side: Side,
    pub product: &'a PublicProduct,
    pub private_limit: Money,
    pub history: &'a [Utterance],
    /// Offers extracted from the opponent's messages, oldest first.
    pub opponent_offers: &'a [Money],
    pub round: u32,
}

impl AgentView<'_> {
    pub fn own_turns(&self) -> usize {
        self.history.iter().filter(|u| u.speaker == self.side).count()
    }

    /// Full product record as this side knows it (wholesale only for the seller).
    pub fn seller_product(&self) -> Product {
        Product {
            name: self.product.name.clone(),
            retail_price: self.product.retail_price,
            wholesale_price: self.private_limit,
            features: self.product.features.clone(),
            reference: String::new(),
            category: Default::default(),
        }
    }
}

/// A negotiating party. For the buyer, the first call (empty history) is the
/// opening greeting.
pub trait Participant: Send {
    fn id(&self) -> &str;
    fn speak(&mut self, view: &AgentView<'_>) -> Result<String, AgentError>;
}

pub trait Judge: Send + Sync {
    fn classify(&self, buyer_message: &str, seller_message: Option<&str>)
        -> Result<Decision, AgentError>;
}

pub trait Analyst: Send + Sync {
    fn extract(&self, seller_message: &str) -> Result<Option<Money>, AgentError>;
}

impl<T: Participant + ?Sized> Participant for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn speak(&mut self, view: &AgentView<'_>) -> Result<String, AgentError> {
        (**self).speak(view)
    }
}
