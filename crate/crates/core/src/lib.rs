//! Buyer/seller negotiation benchmark: catalog, prompts, agents, the
//! negotiation engine, metrics, prompt-search bandit and experiment runner.

pub mod agents;
pub mod bandit;
pub mod catalog;
pub mod engine;
pub mod metrics;
pub mod money;
pub mod prompts;
pub mod runner;

pub use money::Money;
