//! Online softmax bandit over the 96 buyer strategy prompts.
//!
//! Policy π = softmax(θ) over the active set, EMA baseline
//! b_t = 0.9·b_{t−1} + 0.1·r_t, advantage A = r_t − b_t, and a single
//! coordinate update θ_a += η·A·(1 − π_a). Training runs a warmup that pulls
//! every arm under high and low budgets, then a main phase with ε-greedy
//! mixing, budget phases and a shrinking active set.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{RuleAnalyst, RuleJudge, ScriptedParticipant, ScriptedPolicy, StallExit};
use crate::catalog::{derive_budget, BudgetLevel, Product};
use crate::engine::{run_negotiation, EpisodeMeta, Flags, NegotiationConfig};
use crate::prompts::{BudgetEmphasis, ConcessionStyle, StrategyAction, ACTION_COUNT};

pub const BASELINE_DECAY: f64 = 0.9;

#[derive(Debug, Error)]
pub enum BanditError {
    #[error("arm {0} is not in the active set")]
    InactiveArm(usize),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("environment failed: {0}")]
    Env(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Softmax of `theta` restricted to `subset`, in subset order.
pub fn softmax_policy(theta: &[f64], subset: &[usize]) -> Vec<f64> {
    assert!(!subset.is_empty(), "softmax over an empty subset");
    let max = subset
        .iter()
        .map(|&i| theta[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = subset.iter().map(|&i| (theta[i] - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub w_overpay_high: f64,
    pub w_oob_low: f64,
    pub w_deadlock: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            w_overpay_high: 2.0,
            w_oob_low: 1.0,
            w_deadlock: 1.0,
        }
    }
}

/// What the reward needs from one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpisodeFeedback {
    pub flags: Flags,
    pub deadlock: bool,
}

pub fn compute_reward(fb: &EpisodeFeedback, level: BudgetLevel, spec: &RewardSpec) -> f64 {
    let mut r = 0.0;
    if level == BudgetLevel::High && fb.flags.over_retail {
        r -= spec.w_overpay_high;
    }
    if level == BudgetLevel::Low && fb.flags.over_budget {
        r -= spec.w_oob_low;
    }
    if fb.deadlock {
        r -= spec.w_deadlock;
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub theta: Vec<f64>,
    pub baseline: f64,
    pub step: u64,
    pub pull_counts: Vec<u64>,
    /// Sorted arm indices.
    pub active_set: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateTrace {
    pub baseline: f64,
    pub advantage: f64,
    pub pi: f64,
}

impl BanditState {
    pub fn new(arms: usize) -> Self {
        BanditState {
            theta: vec![0.0; arms],
            baseline: 0.0,
            step: 0,
            pull_counts: vec![0; arms],
            active_set: (0..arms).collect(),
        }
    }

    pub fn policy(&self) -> Vec<f64> {
        softmax_policy(&self.theta, &self.active_set)
    }

    /// Baseline first, then the advantage against the new baseline, then
    /// the chosen coordinate. π is taken over the active set (or all arms
    /// when `global_pi`) before θ moves.
    pub fn update(
        &mut self,
        arm: usize,
        reward: f64,
        eta: f64,
        global_pi: bool,
    ) -> Result<UpdateTrace, BanditError> {
        let pos = self
            .active_set
            .binary_search(&arm)
            .map_err(|_| BanditError::InactiveArm(arm))?;
        let pi = if global_pi {
            let all: Vec<usize> = (0..self.theta.len()).collect();
            softmax_policy(&self.theta, &all)[arm]
        } else {
            softmax_policy(&self.theta, &self.active_set)[pos]
        };
        self.baseline = BASELINE_DECAY * self.baseline + (1.0 - BASELINE_DECAY) * reward;
        let advantage = reward - self.baseline;
        self.theta[arm] += eta * advantage * (1.0 - pi);
        self.pull_counts[arm] += 1;
        self.step += 1;
        Ok(UpdateTrace {
            baseline: self.baseline,
            advantage,
            pi,
        })
    }

    /// Highest θ over all arms, lowest index on ties.
    pub fn best_action(&self) -> usize {
        let mut best = 0;
        for (i, t) in self.theta.iter().enumerate() {
            if *t > self.theta[best] {
                best = i;
            }
        }
        best
    }

    /// Keep the `k` arms of `candidates` with the highest θ; ties go to the
    /// less-pulled arm, then the lower index.
    pub fn restrict_to_top(&mut self, candidates: &[usize], k: usize) {
        let mut order = candidates.to_vec();
        order.sort_by(|&a, &b| {
            self.theta[b]
                .total_cmp(&self.theta[a])
                .then(self.pull_counts[a].cmp(&self.pull_counts[b]))
                .then(a.cmp(&b))
        });
        order.truncate(k.max(1));
        order.sort_unstable();
        self.active_set = order;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectKind {
    Warmup,
    Forced,
    Explore,
    Exploit,
}

/// Forced coverage when `state.step` is a multiple of `coverage_interval`
/// (least-pulled active arm, lowest index on ties); otherwise a uniform
/// active arm with probability `eps`, else a draw from π.
pub fn select_action(
    state: &BanditState,
    eps: f64,
    coverage_interval: u64,
    rng: &mut impl Rng,
) -> (usize, SelectKind) {
    if coverage_interval > 0 && state.step.is_multiple_of(coverage_interval) {
        let arm = *state
            .active_set
            .iter()
            .min_by_key(|&&a| (state.pull_counts[a], a))
            .expect("active set is non-empty");
        return (arm, SelectKind::Forced);
    }
    if rng.random::<f64>() < eps {
        let i = rng.random_range(0..state.active_set.len());
        return (state.active_set[i], SelectKind::Explore);
    }
    let pi = state.policy();
    let i = WeightedIndex::new(&pi)
        .expect("softmax weights are positive")
        .sample(rng);
    (state.active_set[i], SelectKind::Exploit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Main-phase steps M (warmup adds 2·96 more).
    pub total_steps: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub low_budget_phase_fraction: f64,
    pub high_budget_prob_phase2: f64,
    pub k_initial: usize,
    pub k_final: usize,
    pub shrink_at_fraction: f64,
    pub coverage_interval: u64,
    pub eta: f64,
    /// Evaluate π over all arms in the update instead of the active set.
    #[serde(default)]
    pub global_pi: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            total_steps: 500,
            eps_start: 0.10,
            eps_end: 0.02,
            low_budget_phase_fraction: 0.5,
            high_budget_prob_phase2: 0.7,
            k_initial: 24,
            k_final: 12,
            shrink_at_fraction: 2.0 / 3.0,
            coverage_interval: 10,
            eta: 0.1,
            global_pi: false,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), BanditError> {
        let bad = |m: &str| Err(BanditError::InvalidSchedule(m.to_string()));
        if !(0.0 < self.eps_end && self.eps_end <= self.eps_start && self.eps_start < 1.0) {
            return bad("need 0 < eps_end <= eps_start < 1");
        }
        if !(1 <= self.k_final && self.k_final <= self.k_initial && self.k_initial <= ACTION_COUNT) {
            return bad("need 1 <= k_final <= k_initial <= 96");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.coverage_interval == 0 {
            return bad("coverage interval must be at least 1");
        }
        for f in [
            self.low_budget_phase_fraction,
            self.high_budget_prob_phase2,
            self.shrink_at_fraction,
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad("fractions and probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Linear anneal over main-phase step `k` in 0..M.
    pub fn epsilon(&self, k: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.eps_start;
        }
        let progress = k as f64 / (self.total_steps - 1) as f64;
        self.eps_start + (self.eps_end - self.eps_start) * progress.min(1.0)
    }

    /// First main-phase step that runs with the reduced active set.
    pub fn shrink_step(&self) -> u64 {
        (self.total_steps as f64 * self.shrink_at_fraction).ceil() as u64
    }

    fn low_only(&self, k: u64) -> bool {
        (k as f64) < self.total_steps as f64 * self.low_budget_phase_fraction
    }
}

pub const WARMUP_LEVELS: [BudgetLevel; 2] = [BudgetLevel::High, BudgetLevel::Low];

pub fn warmup_len(arms: usize) -> usize {
    arms * WARMUP_LEVELS.len()
}

/// Runs one episode for a strategy arm under a budget level.
pub trait BanditEnv {
    fn run(&mut self, arm: usize, level: BudgetLevel) -> Result<EpisodeFeedback, BanditError>;

    /// Called with the number of finished episodes when training resumes
    /// from a checkpoint, for environments that cycle through inputs.
    fn resume_at(&mut self, _episodes: usize) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub phase: Phase,
    pub action: usize,
    pub budget_level: BudgetLevel,
    pub reward: f64,
    pub baseline: f64,
    pub advantage: f64,
    pub epsilon: Option<f64>,
    pub active_size: usize,
    pub selection: SelectKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng, BanditError> {
        let bytes = hex::decode(&self.seed).map_err(|e| BanditError::Checkpoint(e.to_string()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| BanditError::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub theta: Vec<f64>,
    pub baseline: f64,
    pub step: u64,
    pub pull_counts: Vec<u64>,
    pub active_set: Vec<usize>,
    pub schedule: Schedule,
    pub reward_spec: RewardSpec,
    pub rng_seed: u64,
    pub rng_state: RngState,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub state: BanditState,
    pub schedule: Schedule,
    pub spec: RewardSpec,
    pub history: Vec<HistoryEntry>,
    seed: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Error)]
#[error("{source}")]
pub struct TrainError {
    pub source: BanditError,
    /// State before the failed step; resuming from it repeats that step.
    pub checkpoint: Box<Checkpoint>,
}

impl Trainer {
    pub fn new(schedule: Schedule, spec: RewardSpec, seed: u64) -> Result<Self, BanditError> {
        schedule.validate()?;
        Ok(Trainer {
            state: BanditState::new(ACTION_COUNT),
            schedule,
            spec,
            history: Vec::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self, BanditError> {
        cp.schedule.validate()?;
        let arms = cp.theta.len();
        if cp.pull_counts.len() != arms
            || cp.active_set.is_empty()
            || cp.active_set.iter().any(|&a| a >= arms)
            || cp.history.len() as u64 != cp.step
        {
            return Err(BanditError::Checkpoint("inconsistent checkpoint".into()));
        }
        let mut active_set = cp.active_set;
        active_set.sort_unstable();
        Ok(Trainer {
            rng: cp.rng_state.restore()?,
            state: BanditState {
                theta: cp.theta,
                baseline: cp.baseline,
                step: cp.step,
                pull_counts: cp.pull_counts,
                active_set,
            },
            schedule: cp.schedule,
            spec: cp.reward_spec,
            history: cp.history,
            seed: cp.rng_seed,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            theta: self.state.theta.clone(),
            baseline: self.state.baseline,
            step: self.state.step,
            pull_counts: self.state.pull_counts.clone(),
            active_set: self.state.active_set.clone(),
            schedule: self.schedule,
            reward_spec: self.spec,
            rng_seed: self.seed,
            rng_state: RngState::capture(&self.rng),
            history: self.history.clone(),
        }
    }

    pub fn total_len(&self) -> usize {
        warmup_len(self.state.theta.len()) + self.schedule.total_steps as usize
    }

    pub fn is_done(&self) -> bool {
        self.history.len() >= self.total_len()
    }

    /// Advance by one pull. On environment failure nothing changes.
    pub fn step(&mut self, env: &mut dyn BanditEnv) -> Result<(), BanditError> {
        let saved = (self.state.clone(), self.rng.clone());
        let result = self.step_inner(env);
        if result.is_err() {
            (self.state, self.rng) = saved;
        }
        result
    }

    fn step_inner(&mut self, env: &mut dyn BanditEnv) -> Result<(), BanditError> {
        let t = self.history.len();
        let warm = warmup_len(self.state.theta.len());
        let (arm, level, selection, epsilon, phase) = if t < warm {
            let arm = t / WARMUP_LEVELS.len();
            let level = WARMUP_LEVELS[t % WARMUP_LEVELS.len()];
            (arm, level, SelectKind::Warmup, None, Phase::Warmup)
        } else {
            let k = (t - warm) as u64;
            let s = self.schedule;
            if k == 0 {
                let all: Vec<usize> = (0..self.state.theta.len()).collect();
                self.state.restrict_to_top(&all, s.k_initial);
            }
            if k == s.shrink_step() && k > 0 {
                let current = self.state.active_set.clone();
                self.state.restrict_to_top(&current, s.k_final);
            }
            let level = if s.low_only(k) || self.rng.random::<f64>() >= s.high_budget_prob_phase2 {
                BudgetLevel::Low
            } else {
                BudgetLevel::High
            };
            let eps = s.epsilon(k);
            let (arm, kind) = select_action(&self.state, eps, s.coverage_interval, &mut self.rng);
            (arm, level, kind, Some(eps), Phase::Main)
        };
        let fb = env.run(arm, level)?;
        let reward = compute_reward(&fb, level, &self.spec);
        let trace = self
            .state
            .update(arm, reward, self.schedule.eta, self.schedule.global_pi)?;
        self.history.push(HistoryEntry {
            step: t as u64,
            phase,
            action: arm,
            budget_level: level,
            reward,
            baseline: trace.baseline,
            advantage: trace.advantage,
            epsilon,
            active_size: self.state.active_set.len(),
            selection,
        });
        Ok(())
    }

    /// Run to completion, calling `after_step` after every pull (for
    /// checkpointing).
    pub fn run(
        &mut self,
        env: &mut dyn BanditEnv,
        mut after_step: impl FnMut(&Trainer) -> Result<(), BanditError>,
    ) -> Result<usize, TrainError> {
        while !self.is_done() {
            if let Err(source) = self.step(env).and_then(|_| after_step(self)) {
                return Err(TrainError {
                    source,
                    checkpoint: Box::new(self.checkpoint()),
                });
            }
        }
        Ok(self.state.best_action())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub best_action: usize,
    pub state: BanditState,
    pub history: Vec<HistoryEntry>,
}

pub fn train(
    env: &mut dyn BanditEnv,
    schedule: Schedule,
    spec: RewardSpec,
    seed: u64,
) -> Result<TrainResult, TrainError> {
    let mut trainer = Trainer::new(schedule, spec, seed).map_err(|source| TrainError {
        source,
        checkpoint: Box::new(Checkpoint {
            theta: Vec::new(),
            baseline: 0.0,
            step: 0,
            pull_counts: Vec::new(),
            active_set: Vec::new(),
            schedule,
            reward_spec: spec,
            rng_seed: seed,
            rng_state: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
            history: Vec::new(),
        }),
    })?;
    let best_action = trainer.run(env, |_| Ok(()))?;
    Ok(TrainResult {
        best_action,
        state: trainer.state,
        history: trainer.history,
    })
}

/// Deterministic environment where one arm is clean and every other arm
/// deadlocks, for checking that the optimizer finds the clean arm.
#[derive(Debug, Clone)]
pub struct SeparableEnv {
    pub good_arm: usize,
}

impl BanditEnv for SeparableEnv {
    fn run(&mut self, arm: usize, _level: BudgetLevel) -> Result<EpisodeFeedback, BanditError> {
        Ok(EpisodeFeedback {
            flags: Flags::default(),
            deadlock: arm != self.good_arm,
        })
    }
}

/// Scripted buyer whose policy is shaped by the strategy arm, negotiating
/// against a scripted seller with rule-based judge and analyst.
///
/// Axis mapping: medium-hard budget emphasis lets the buyer go 30% past
/// its budget, hard keeps it within; the exit rule walks away after
/// `exit_turns` seller turns conceding less than the progress threshold;
/// tiny-step concessions raise the offer by 2% of retail instead of 5%.
/// The other axes do not change scripted behavior.
#[derive(Debug, Clone)]
pub struct ScriptedPromptEnv {
    pub products: Vec<Product>,
    pub t_max: u32,
    pub seller_step: f64,
    /// Episodes run so far; picks the next product. Set it when resuming.
    pub episodes: usize,
}

impl ScriptedPromptEnv {
    pub fn new(products: Vec<Product>, t_max: u32) -> Self {
        assert!(!products.is_empty(), "scripted environment needs a product");
        ScriptedPromptEnv {
            products,
            t_max,
            seller_step: 0.05,
            episodes: 0,
        }
    }

    pub fn buyer_policy(action: &StrategyAction, budget: crate::money::Money) -> ScriptedPolicy {
        let step = match action.concession_style {
            ConcessionStyle::TinySteps => 0.02,
            ConcessionStyle::None => 0.05,
        };
        let mut p = ScriptedPolicy::buyer(0.70, step, budget);
        p.cap_slack = match action.budget_emphasis {
            BudgetEmphasis::MediumHard => 0.3,
            BudgetEmphasis::Hard => 0.0,
        };
        p.stall_exit = Some(StallExit {
            turns: u32::from(action.exit_turns),
            threshold: action.progress_threshold.ratio(),
        });
        p
    }
}

impl BanditEnv for ScriptedPromptEnv {
    fn run(&mut self, arm: usize, level: BudgetLevel) -> Result<EpisodeFeedback, BanditError> {
        let action =
            StrategyAction::from_index(arm).map_err(|e| BanditError::Env(e.to_string()))?;
        let product = self.products[self.episodes % self.products.len()].clone();
        self.episodes += 1;
        let budget = derive_budget(&product, level);
        let mut cfg = NegotiationConfig::new(product, budget);
        cfg.t_max = self.t_max;
        let mut buyer = ScriptedParticipant::new("scripted-buyer", Self::buyer_policy(&action, budget));
        let mut seller = ScriptedParticipant::new(
            "scripted-seller",
            ScriptedPolicy::seller(self.seller_step, cfg.product.wholesale_price),
        );
        let t = run_negotiation(
            &mut buyer,
            &mut seller,
            &RuleJudge,
            &RuleAnalyst,
            &cfg,
            &EpisodeMeta {
                budget_level: Some(level),
                ..Default::default()
            },
        )
        .map_err(|e| BanditError::Env(e.to_string()))?;
        let o = t.outcome.expect("completed transcript has an outcome");
        Ok(EpisodeFeedback {
            flags: o.flags,
            deadlock: o.deadlock,
        })
    }

    fn resume_at(&mut self, episodes: usize) {
        self.episodes = episodes;
    }
}
