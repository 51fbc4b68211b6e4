use dealbench::bandit::{
    softmax_policy, train, BanditEnv, BanditError, BanditState, Checkpoint, EpisodeFeedback,
    Phase, RewardSpec, Schedule, SeparableEnv, Trainer,
};
use dealbench::catalog::BudgetLevel;
use proptest::prelude::*;

fn schedule(steps: u64) -> Schedule {
    Schedule {
        total_steps: steps,
        ..Schedule::default()
    }
}

#[test]
fn finds_the_clean_arm() {
    let mut wins = 0;
    for seed in 0..20u64 {
        let good = ((seed * 37 + 17) % 96) as usize;
        let r = train(&mut SeparableEnv { good_arm: good }, schedule(500), RewardSpec::default(), seed)
            .unwrap();
        wins += usize::from(r.best_action == good);
    }
    assert!(wins >= 19, "{wins}/20");
}

#[test]
fn schedule_shape_in_history() {
    let r = train(&mut SeparableEnv { good_arm: 17 }, schedule(500), RewardSpec::default(), 4).unwrap();
    assert_eq!(r.history.len(), 2 * 96 + 500);
    let (warm, main): (Vec<_>, Vec<_>) = r.history.iter().partition(|h| h.phase == Phase::Warmup);
    assert_eq!(warm.len(), 192);
    for arm in 0..96 {
        let levels: Vec<_> = warm.iter().filter(|h| h.action == arm).map(|h| h.budget_level).collect();
        assert_eq!(levels, [BudgetLevel::High, BudgetLevel::Low]);
    }
    assert!(warm.iter().all(|h| h.active_size == 96 && h.epsilon.is_none()));
    for (k, h) in main.iter().enumerate() {
        let eps = h.epsilon.unwrap();
        assert!((eps - (0.10 - 0.08 * k as f64 / 499.0)).abs() < 1e-12);
        assert_eq!(h.active_size, if k < 334 { 24 } else { 12 });
        if k < 250 {
            assert_eq!(h.budget_level, BudgetLevel::Low);
        }
    }
    let second_half = &main[250..];
    let high = second_half.iter().filter(|h| h.budget_level == BudgetLevel::High).count() as f64;
    let frac = high / second_half.len() as f64;
    assert!((0.55..0.85).contains(&frac), "{frac}");
}

#[test]
fn learning_improves_reward() {
    let r = train(&mut SeparableEnv { good_arm: 50 }, schedule(500), RewardSpec::default(), 11).unwrap();
    let main: Vec<f64> = r.history[192..].iter().map(|h| h.reward).collect();
    let first = main[..50].iter().sum::<f64>() / 50.0;
    let last = main[450..].iter().sum::<f64>() / 50.0;
    assert!(last >= first, "{first} -> {last}");
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let r = train(&mut SeparableEnv { good_arm: 3 }, schedule(200), RewardSpec::default(), 99).unwrap();
        serde_json::to_string(&(r.state, r.history)).unwrap()
    };
    assert_eq!(run(), run());
}

/// Fails once at a given pull, then behaves like the separable env.
struct FlakyEnv {
    inner: SeparableEnv,
    calls: usize,
    fail_at: usize,
}

impl BanditEnv for FlakyEnv {
    fn run(&mut self, arm: usize, level: BudgetLevel) -> Result<EpisodeFeedback, BanditError> {
        self.calls += 1;
        if self.calls == self.fail_at {
            return Err(BanditError::Env("endpoint unreachable".into()));
        }
        self.inner.run(arm, level)
    }
}

#[test]
fn resume_after_failure_matches_uninterrupted_run() {
    let spec = RewardSpec::default();
    let full = train(&mut SeparableEnv { good_arm: 9 }, schedule(300), spec, 5).unwrap();

    let mut env = FlakyEnv { inner: SeparableEnv { good_arm: 9 }, calls: 0, fail_at: 350 };
    let err = train(&mut env, schedule(300), spec, 5).unwrap_err();
    assert_eq!(err.checkpoint.history.len(), 349);
    let json = serde_json::to_string(&*err.checkpoint).unwrap();
    let cp: Checkpoint = serde_json::from_str(&json).unwrap();
    let mut trainer = Trainer::from_checkpoint(cp).unwrap();
    let best = trainer.run(&mut env, |_| Ok(())).unwrap();
    assert_eq!(best, full.best_action);
    assert_eq!(trainer.state, full.state);
    assert_eq!(trainer.history, full.history);
}

#[test]
fn constant_reward_freezes_theta_after_warmup() {
    struct Constant;
    impl BanditEnv for Constant {
        fn run(&mut self, _: usize, _: BudgetLevel) -> Result<EpisodeFeedback, BanditError> {
            Ok(EpisodeFeedback { flags: Default::default(), deadlock: true })
        }
    }
    let mut t = Trainer::new(schedule(100), RewardSpec::default(), 1).unwrap();
    for _ in 0..192 {
        t.step(&mut Constant).unwrap();
    }
    let after_warmup = t.state.theta.clone();
    t.run(&mut Constant, |_| Ok(())).unwrap();
    // the baseline has settled at -1, so advantages are ~0.9^192
    let drift = t.state.theta.iter().zip(&after_warmup).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-6, "{drift}");
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_permutation_equivariant(
        theta in prop::collection::vec(-50.0f64..50.0, 2..40),
        rot in 0usize..40,
    ) {
        let n = theta.len();
        let all: Vec<usize> = (0..n).collect();
        let p = softmax_policy(&theta, &all);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x > 0.0));
        let r = rot % n;
        let mut rotated = theta.clone();
        rotated.rotate_left(r);
        let q = softmax_policy(&rotated, &all);
        for i in 0..n {
            prop_assert!((q[i] - p[(i + r) % n]).abs() < 1e-15);
        }
    }

    #[test]
    fn update_touches_one_coordinate(
        theta in prop::collection::vec(-3.0f64..3.0, 96),
        arm in 0usize..96,
        reward in -3.0f64..0.0,
        baseline in -3.0f64..0.0,
    ) {
        let mut s = BanditState::new(96);
        s.theta = theta.clone();
        s.baseline = baseline;
        s.update(arm, reward, 0.1, false).unwrap();
        let changed = s.theta.iter().zip(&theta).filter(|(a, b)| a != b).count();
        prop_assert!(changed <= 1);
        prop_assert!(s.theta.iter().enumerate().all(|(i, t)| i == arm || *t == theta[i]));
    }
}
