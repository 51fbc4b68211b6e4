//! Deterministic buyer and seller used as test oracles and for desk-scale runs.
//!
//! The buyer opens at `open_ratio`·p_r and raises by `step_ratio`·p_r per turn,
//! capped at its budget. The seller opens at `open_ratio`·p_r (1.0 by default)
//! and lowers by `step_ratio`·p_r per turn, floored at the wholesale price.
//! Under cross-accept a side accepts once the opponent's standing offer is at
//! least as good as its own next planned offer.

use serde::{Deserialize, Serialize};

use super::{AgentError, AgentView, Decision, Participant, Side};
use crate::money::Money;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcceptRule {
    #[default]
    CrossAccept,
}

/// Buyer walk-away rule: reject after `turns` consecutive seller concessions
/// each smaller than `threshold` (a fraction of the previous offer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StallExit {
    pub turns: u32,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub role: Side,
    pub open_ratio: f64,
    pub step_ratio: f64,
    #[serde(default)]
    pub accept_rule: AcceptRule,
    /// Budget for the buyer, wholesale price for the seller.
    pub floor_or_cap: Money,
    /// Buyer only: fraction by which the cap is treated as soft. Zero keeps
    /// the buyer strictly within budget.
    #[serde(default)]
    pub cap_slack: f64,
    #[serde(default)]
    pub stall_exit: Option<StallExit>,
}

impl ScriptedPolicy {
    pub fn buyer(open_ratio: f64, step_ratio: f64, budget: Money) -> Self {
        ScriptedPolicy {
            role: Side::Buyer,
            open_ratio,
            step_ratio,
            accept_rule: AcceptRule::CrossAccept,
            floor_or_cap: budget,
            cap_slack: 0.0,
            stall_exit: None,
        }
    }

    pub fn seller(step_ratio: f64, wholesale: Money) -> Self {
        ScriptedPolicy {
            role: Side::Seller,
            open_ratio: 1.0,
            step_ratio,
            accept_rule: AcceptRule::CrossAccept,
            floor_or_cap: wholesale,
            cap_slack: 0.0,
            stall_exit: None,
        }
    }

    fn effective_cap(&self) -> Money {
        if self.cap_slack > 0.0 {
            self.floor_or_cap.scale(1.0 + self.cap_slack)
        } else {
            self.floor_or_cap
        }
    }

    /// Offer this side plans to make on its `k`-th turn (0-based).
    pub fn planned_offer(&self, retail: Money, k: usize) -> Money {
        let open = retail.scale(self.open_ratio);
        let step = retail.scale(self.step_ratio);
        let k = k as i64;
        match self.role {
            Side::Buyer => {
                let raw = Money::from_cents(open.cents() + k * step.cents());
                raw.min(self.effective_cap())
            }
            Side::Seller => {
                let raw = Money::from_cents(open.cents() - k * step.cents());
                raw.max(self.floor_or_cap)
            }
        }
    }

    fn stalled(&self, offers: &[Money]) -> bool {
        let Some(rule) = self.stall_exit else {
            return false;
        };
        let n = rule.turns as usize;
        if n == 0 || offers.len() < n + 1 {
            return false;
        }
        offers[offers.len() - n - 1..].windows(2).all(|w| {
            let prev = w[0].to_f64();
            prev <= 0.0 || (prev - w[1].to_f64()) / prev < rule.threshold
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutput {
    pub utterance: String,
    pub proposed_price: Option<Money>,
    pub intent: Decision,
}

/// One deterministic turn for `policy` given what its side can see.
pub fn scripted_step(policy: &ScriptedPolicy, view: &AgentView<'_>) -> StepOutput {
    let k = view.own_turns();
    let planned = policy.planned_offer(view.product.retail_price, k);
    let standing = view.opponent_offers.last().copied();
    match policy.role {
        Side::Buyer => {
            if let Some(s) = standing {
                if s <= planned {
                    return StepOutput {
                        utterance: format!("Deal, I accept your offer of {}.", s.usd()),
                        proposed_price: Some(s),
                        intent: Decision::Acceptance,
                    };
                }
                if policy.stalled(view.opponent_offers) {
                    return StepOutput {
                        utterance: "I cannot afford that, I'm walking away.".into(),
                        proposed_price: None,
                        intent: Decision::Rejection,
                    };
                }
            }
            let utterance = if k == 0 {
                format!(
                    "Hello! I'm interested in the {}. Would you consider {}?",
                    view.product.name,
                    planned.usd()
                )
            } else {
                format!("Could you do {} instead?", planned.usd())
            };
            StepOutput {
                utterance,
                proposed_price: Some(planned),
                intent: Decision::Continue,
            }
        }
        Side::Seller => match standing {
            Some(b) if b >= planned => StepOutput {
                utterance: format!("You have a deal at {}.", b.usd()),
                proposed_price: Some(b),
                intent: Decision::Acceptance,
            },
            _ => StepOutput {
                utterance: format!("I can offer it to you for {}.", planned.usd()),
                proposed_price: Some(planned),
                intent: Decision::Continue,
            },
        },
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedParticipant {
    id: String,
    pub policy: ScriptedPolicy,
}

impl ScriptedParticipant {
    pub fn new(id: impl Into<String>, policy: ScriptedPolicy) -> Self {
        ScriptedParticipant {
            id: id.into(),
            policy,
        }
    }
}

impl Participant for ScriptedParticipant {
    fn id(&self) -> &str {
        &self.id
    }

    fn speak(&mut self, view: &AgentView<'_>) -> Result<String, AgentError> {
        Ok(scripted_step(&self.policy, view).utterance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{extract_price, PublicProduct, Utterance};
    use proptest::prelude::*;

    fn product(retail: i64) -> PublicProduct {
        PublicProduct {
            name: "Widget".into(),
            retail_price: Money::from_dollars(retail),
            features: "a widget".into(),
        }
    }

    /// Alternate the two policies by hand (buyer opens), returning the offer
    /// sequences and the price at which someone accepted, if any.
    fn simulate(
        p: &PublicProduct,
        buyer: &ScriptedPolicy,
        seller: &ScriptedPolicy,
        max_rounds: u32,
    ) -> (Vec<Money>, Vec<Money>, Option<(u32, Money)>) {
        let mut history = Vec::new();
        let (mut b_offers, mut s_offers) = (Vec::new(), Vec::new());
        let view = |side, limit, history: &[Utterance], opp: &[Money], round| {
            let v = AgentView {
                side,
                product: p,
                private_limit: limit,
                history,
                opponent_offers: opp,
                round,
            };
            scripted_step(if side == Side::Buyer { buyer } else { seller }, &v)
        };
        let g = view(Side::Buyer, buyer.floor_or_cap, &history, &s_offers, 1);
        b_offers.push(g.proposed_price.unwrap());
        history.push(Utterance { speaker: Side::Buyer, text: g.utterance });
        for round in 1..=max_rounds {
            let s = view(Side::Seller, seller.floor_or_cap, &history, &b_offers, round);
            s_offers.push(extract_price(&s.utterance).unwrap());
            history.push(Utterance { speaker: Side::Seller, text: s.utterance });
            let b = view(Side::Buyer, buyer.floor_or_cap, &history, &s_offers, round);
            history.push(Utterance { speaker: Side::Buyer, text: b.utterance });
            if b.intent == Decision::Acceptance {
                return (b_offers, s_offers, Some((round, b.proposed_price.unwrap())));
            }
            if let Some(x) = b.proposed_price {
                b_offers.push(x);
            }
        }
        (b_offers, s_offers, None)
    }

    #[test]
    fn crossing_closes_at_85_in_round_4() {
        let p = product(100);
        let buyer = ScriptedPolicy::buyer(0.70, 0.05, Money::from_dollars(100));
        let seller = ScriptedPolicy::seller(0.05, Money::from_dollars(60));
        let (b, s, deal) = simulate(&p, &buyer, &seller, 30);
        let dollars = |v: &[Money]| v.iter().map(|m| m.cents() / 100).collect::<Vec<_>>();
        assert_eq!(dollars(&b), [70, 75, 80, 85]);
        assert_eq!(dollars(&s), [100, 95, 90, 85]);
        assert_eq!(deal, Some((4, Money::from_dollars(85))));
    }

    #[test]
    fn infeasible_budget_never_crosses() {
        let p = product(100);
        let buyer = ScriptedPolicy::buyer(0.70, 0.05, Money::from_dollars(65));
        let seller = ScriptedPolicy::seller(0.05, Money::from_dollars(80));
        let (b, s, deal) = simulate(&p, &buyer, &seller, 30);
        assert_eq!(deal, None);
        assert!(b.iter().all(|x| *x == Money::from_dollars(65)));
        assert_eq!(*s.last().unwrap(), Money::from_dollars(80));
        assert_eq!(s.len(), 30);
    }

    #[test]
    fn zero_step_at_retail_accepts_immediately() {
        let p = product(100);
        let buyer = ScriptedPolicy::buyer(1.0, 0.0, Money::from_dollars(120));
        let seller = ScriptedPolicy::seller(0.0, Money::from_dollars(60));
        let (_, _, deal) = simulate(&p, &buyer, &seller, 30);
        assert_eq!(deal, Some((1, Money::from_dollars(100))));
    }

    #[test]
    fn stall_exit_rejects() {
        let p = product(100);
        let mut buyer = ScriptedPolicy::buyer(0.5, 0.01, Money::from_dollars(55));
        buyer.stall_exit = Some(StallExit { turns: 2, threshold: 0.003 });
        let history = vec![
            Utterance { speaker: Side::Buyer, text: "hi".into() },
            Utterance { speaker: Side::Seller, text: "$80".into() },
            Utterance { speaker: Side::Buyer, text: "x".into() },
            Utterance { speaker: Side::Seller, text: "$80".into() },
            Utterance { speaker: Side::Buyer, text: "x".into() },
            Utterance { speaker: Side::Seller, text: "$80".into() },
        ];
        let offers = [Money::from_dollars(80); 3];
        let v = AgentView {
            side: Side::Buyer,
            product: &p,
            private_limit: buyer.floor_or_cap,
            history: &history,
            opponent_offers: &offers,
            round: 3,
        };
        let out = scripted_step(&buyer, &v);
        assert_eq!(out.intent, Decision::Rejection);
        assert_eq!(
            crate::agents::classify_decision(&out.utterance, None),
            Decision::Rejection
        );
    }

    proptest! {
        #[test]
        fn offers_respect_limits_and_are_deterministic(
            retail in 100i64..1_000_000,
            open in 0.3f64..1.0,
            step in 0.0f64..0.2,
            cap_frac in 0.5f64..1.3,
            floor_frac in 0.3f64..0.99,
        ) {
            let p = product(retail);
            let cap = Money::from_dollars(retail).scale(cap_frac);
            let floor = Money::from_dollars(retail).scale(floor_frac);
            let buyer = ScriptedPolicy::buyer(open, step, cap);
            let seller = ScriptedPolicy::seller(step, floor);
            let (b, s, deal) = simulate(&p, &buyer, &seller, 30);
            prop_assert!(b.iter().all(|x| *x <= cap));
            prop_assert!(s.iter().all(|x| *x >= floor));
            if let Some((_, price)) = deal {
                prop_assert!(price <= cap && price >= floor);
            }
            prop_assert_eq!(simulate(&p, &buyer, &seller, 30), (b, s, deal));
        }
    }
}
