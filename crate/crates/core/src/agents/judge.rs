//! Rule-based judge: classify the buyer's latest message.

use std::sync::LazyLock;

use regex::Regex;

use super::{AgentError, Decision, Judge};

static REJECT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(concat!(
        r"(?i)\bcan(?:not|'t| not) afford\b",
        r"|\bwalk(?:ing)? away\b",
        r"|\bno deal\b",
        r"|\bnot interested\b",
        r"|\bi(?:'ll| will)? pass\b",
        r"|\b(?:i|we)(?: must| have to| will|'ll| am going to)? (?:decline|reject)\b",
        r"|\bend (?:the|this|our) (?:negotiation|conversation|discussion)\b",
        r"|\blook(?:ing)? elsewhere\b",
        r"|\bcan(?:not|'t| not) proceed\b",
        r"|\bout of my (?:price )?range\b",
    ))
    .expect("valid regex")
});

static NEGATED_ACCEPT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:can(?:not|'t| not)|won't|will not|don't|do not|not|unable to) (?:accept|agree|take)\b")
        .expect("valid regex")
});

/// A question proposing a price, e.g. "can we meet at $300?".
static COUNTER_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\$\s?[\d.,]+[^.!?]*\?").expect("valid regex")
});

static ACCEPT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(concat!(
        r"(?i)\bi(?:'ll| will|'m happy to| am happy to)? accept\b",
        r"|\bi agree\b",
        r"|\bagreed\b",
        r"|\b(?:we|you)(?:'ve| have)? (?:got )?a deal\b",
        r"|\bit'?s a deal\b",
        r"|^\W*deal\b",
        r"|\bi'?ll take it\b",
        r"|\blet'?s (?:do it|proceed|finalize|close)\b",
        r"|\bi'?m in\b",
    ))
    .expect("valid regex")
});

fn normalize(text: &str) -> String {
    text.replace(['\u{2019}', '\u{2018}'], "'")
}

/// Keyword classifier over the buyer's message. Rejection (walk-away,
/// cannot afford) outranks everything, a priced counter-question outranks
/// acceptance, and anything else is `Continue`.
pub fn classify_decision(buyer_message: &str, _seller_message: Option<&str>) -> Decision {
    let msg = normalize(buyer_message);
    if REJECT_RE.is_match(&msg) {
        return Decision::Rejection;
    }
    if COUNTER_RE.is_match(&msg) {
        return Decision::Continue;
    }
    if ACCEPT_RE.is_match(&msg) && !NEGATED_ACCEPT_RE.is_match(&msg) {
        return Decision::Acceptance;
    }
    Decision::Continue
}

static REPLY_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(ACCEPTANCE|ACCEPT|REJECTION|REJECT|CONTINUE)\b").expect("valid regex")
});

/// Tolerant parse of a chat-model judge reply: first decision keyword wins,
/// case-insensitive. Unrecognized replies fall back to `Continue`.
pub fn parse_judge_reply(reply: &str) -> Decision {
    match REPLY_RE
        .captures(reply)
        .map(|c| c[1].to_ascii_uppercase())
        .as_deref()
    {
        Some("ACCEPTANCE" | "ACCEPT") => Decision::Acceptance,
        Some("REJECTION" | "REJECT") => Decision::Rejection,
        Some(_) => Decision::Continue,
        None => {
            log::warn!("judge reply {reply:?} has no decision keyword; treating as CONTINUE");
            Decision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleJudge;

impl Judge for RuleJudge {
    fn classify(
        &self,
        buyer_message: &str,
        seller_message: Option<&str>,
    ) -> Result<Decision, AgentError> {
        Ok(classify_decision(buyer_message, seller_message))
    }
}
