//! Rule-based analyst: pull the main-product offer out of a seller message.
//!
//! Candidate prices are `$`-prefixed amounts. An add-on keyword (warranty,
//! insurance, gift, accessory, add-on) claims the nearest candidate within
//! eight tokens; claimed candidates are discarded. Among the rest, a price
//! preceded by an offer cue wins, last mention breaking ties.

use std::sync::LazyLock;

use regex::Regex;

use super::{AgentError, Analyst};
use crate::money::Money;

const ADDON_WINDOW: usize = 8;
const CUE_WINDOW: usize = 2;

static PRICE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\$\s?((?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|\.\d+)").expect("valid regex")
});

static ADDON_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:warrant(?:y|ies)|insurance|gifts?|accessor\w*|add-?ons?)\b")
        .expect("valid regex")
});

static CUE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:offer\w*|sell\w*|do|for|at|is|to|go|down|accept\w*|deal|take)$")
        .expect("valid regex")
});

/// Word index of byte offset `pos`.
fn token_index(text: &str, pos: usize) -> usize {
    text[..pos].split_whitespace().count()
}

#[derive(Debug)]
struct Candidate {
    amount: Money,
    token: usize,
    start: usize,
    claimed: bool,
}

fn candidates(text: &str) -> Vec<Candidate> {
    PRICE_RE
        .captures_iter(text)
        .filter_map(|c| {
            let m = c.get(0)?;
            let amount = Money::parse_decimal(c.get(1)?.as_str()).ok()?;
            Some(Candidate {
                amount,
                token: token_index(text, m.start()),
                start: m.start(),
                claimed: false,
            })
        })
        .collect()
}

fn has_cue(text: &str, price_start: usize) -> bool {
    text[..price_start]
        .split_whitespace()
        .rev()
        .take(CUE_WINDOW)
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .any(|w| CUE_RE.is_match(w))
}

/// Main-product offer in `seller_message`, or `None` when no offer is stated.
pub fn extract_price(seller_message: &str) -> Option<Money> {
    let mut cands = candidates(seller_message);
    if cands.is_empty() {
        return None;
    }
    for kw in ADDON_RE.find_iter(seller_message) {
        let kw_token = token_index(seller_message, kw.start());
        // Nearest candidate; on equal distance the later one.
        let nearest = cands
            .iter_mut()
            .map(|c| (c.token.abs_diff(kw_token), c))
            .filter(|(d, _)| *d <= ADDON_WINDOW)
            .min_by(|(da, a), (db, b)| da.cmp(db).then(b.start.cmp(&a.start)));
        if let Some((_, c)) = nearest {
            c.claimed = true;
        }
    }
    let open: Vec<&Candidate> = cands.iter().filter(|c| !c.claimed).collect();
    open.iter()
        .rev()
        .find(|c| has_cue(seller_message, c.start))
        .or_else(|| open.last())
        .map(|c| c.amount)
}

static REPLY_NUM_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\$?\s?((?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?)").expect("valid regex")
});

/// Tolerant parse of a chat-model analyst reply: `"$25000"`, `"25000"`,
/// `"Price: $25000"` and `"None"` are all understood.
pub fn parse_analyst_reply(reply: &str) -> Option<Money> {
    let t = reply.trim();
    let t = t
        .strip_prefix("Price:")
        .or_else(|| t.strip_prefix("price:"))
        .unwrap_or(t)
        .trim();
    if t.is_empty() || t.trim_matches(|c: char| !c.is_alphanumeric()).eq_ignore_ascii_case("none") {
        return None;
    }
    let c = REPLY_NUM_RE.captures(t)?;
    Money::parse_decimal(c.get(1)?.as_str())
        .ok()
        .filter(|m| m.is_positive())
}

/// Deterministic analyst backed by [`extract_price`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleAnalyst;

impl Analyst for RuleAnalyst {
    fn extract(&self, seller_message: &str) -> Result<Option<Money>, AgentError> {
        Ok(extract_price(seller_message))
    }
}
