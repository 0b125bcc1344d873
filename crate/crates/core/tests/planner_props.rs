use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unrest::env::*;
use unrest::evaluator::*;
use unrest::planner::*;
use unrest::policy::*;
use unrest::segmenter::*;
use unrest::trajlog::*;

struct Fixture {
    trajs: Vec<Trajectory>,
    u: Vec<Vec<f64>>,
    policy: PolicyNet,
    predictor: TargetReturnPredictor,
}

/// A briefly trained UNREST policy and predictor on expert data segmented by
/// random uncertainty values. Quality is irrelevant here, only mechanics.
fn fixture() -> Fixture {
    let trajs = collect_expert(&EnvConfig::default(), &ExpertConfig::default(), 12, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| (0..t.len()).map(|_| rng.random_range(0.0..1.0f64).powi(4)).collect())
        .collect();
    let traces: Vec<UncertaintyTrace> = u.iter().map(|x| UncertaintyTrace::new(x.clone(), 0.3)).collect();
    let (cols, _) = segment_dataset(&trajs, &traces, 4).unwrap();
    let cfg = PolicyTrainConfig {
        layers: 1,
        heads: 2,
        dim: 16,
        batch: 16,
        dropout: 0.0,
        ref_epochs: 1.0,
        ref_dataset_size: total_steps(&trajs) as f64,
        iters_per_epoch: 10,
        ..PolicyTrainConfig::default()
    };
    let (policy, _) = train_policy(PolicyKind::Unrest, &trajs, Some(&cols), &cfg).unwrap();
    let predictor = TargetReturnPredictor::train(&trajs, &cols, &cfg, 2).unwrap();
    Fixture {
        trajs,
        u,
        policy,
        predictor,
    }
}

fn index(f: &Fixture, epsilon: f64, value: Option<f64>) -> KdUncertaintyIndex {
    let u: Vec<Vec<f64>> = match value {
        Some(v) => f.u.iter().map(|x| vec![v; x.len()]).collect(),
        None => f.u.clone(),
    };
    KdUncertaintyIndex::from_dataset(&f.trajs, &u, 5, epsilon).unwrap()
}

fn config(horizon: usize, epsilon: f64) -> PlannerConfig {
    PlannerConfig {
        horizon,
        epsilon,
        ..PlannerConfig::default()
    }
}

#[test]
fn span_and_target_bookkeeping_hold_over_rollouts() {
    let f = fixture();
    let env = EnvConfig::default();
    for (horizon, epsilon) in [(4, 0.2), (30, 0.3), (1, 0.5), (7, 10.0)] {
        let ix = index(&f, epsilon, None);
        let models = PlannerModels {
            policy: &f.policy,
            index: Some(&ix),
            predictor: Some(&f.predictor),
        };
        let mut agent = PlannerAgent::new(models, config(horizon, epsilon)).unwrap();
        let episodes = rollout(&mut agent, &env, &[0, 1], 5).unwrap();
        let (mut resets, mut decrements, mut dummies) = (0, 0, 0);
        for e in &episodes {
            assert_eq!(e.plan.len(), e.steps);
            assert_eq!(bookkeeping_violations(&e.plan, &e.rewards, horizon), 0);
            for (t, tr) in e.plan.iter().enumerate() {
                assert!((1..=horizon).contains(&tr.h));
                assert_eq!(tr.dummy, tr.uncertainty.unwrap() > epsilon || tr.predictor_failed);
                match tr.update {
                    SpanUpdate::Reset => resets += 1,
                    SpanUpdate::Decrement => decrements += 1,
                    SpanUpdate::Init => assert_eq!(t, 0),
                }
                dummies += usize::from(tr.dummy);
            }
        }
        if horizon > 1 && epsilon < 1.0 {
            assert!(resets > 0 && decrements > 0 && dummies > 0, "H {horizon}: {resets} {decrements} {dummies}");
        }
        if epsilon >= 1.0 {
            assert_eq!(dummies, 0);
        }
    }
}

#[test]
fn certain_step_decrements_span_and_target() {
    let f = fixture();
    let ix = index(&f, 0.5, Some(0.0));
    let models = PlannerModels {
        policy: &f.policy,
        index: Some(&ix),
        predictor: Some(&f.predictor),
    };
    let mut st = PlannerState::new(config(30, 0.5), 100.0);
    let s0 = f.trajs[0].steps[0].env_state();
    let (_, tr) = st.plan_step(&s0, 0.0, &models).unwrap();
    assert_eq!((tr.update, tr.h), (SpanUpdate::Init, 30));
    st.h = 4;
    st.rh = 3.0;
    st.prev_uncertain = false;
    let s1 = f.trajs[0].steps[1].env_state();
    let (_, tr) = st.plan_step(&s1, 0.5, &models).unwrap();
    assert_eq!(tr.update, SpanUpdate::Decrement);
    assert_eq!(tr.h, 3);
    assert_eq!(tr.rh, 2.5);
    assert_eq!(tr.global, 99.5);
    assert!(!tr.dummy);
    let last = st.history.back().unwrap();
    assert_eq!((last.h, last.rh, last.ret), (3, 2.5, 99.5));
}

#[test]
fn exhausted_or_uncertain_span_resets_to_a_fresh_target() {
    let f = fixture();
    let ix = index(&f, 0.5, Some(0.0));
    let models = PlannerModels {
        policy: &f.policy,
        index: Some(&ix),
        predictor: Some(&f.predictor),
    };
    let cfg = config(30, 0.5);
    for (h, uncertain) in [(1, false), (9, true)] {
        let mut st = PlannerState::new(cfg.clone(), 50.0);
        st.plan_step(&f.trajs[1].steps[0].env_state(), 0.0, &models).unwrap();
        st.h = h;
        st.rh = -7.0;
        st.prev_uncertain = uncertain;
        let s = f.trajs[1].steps[1].env_state();
        let mut ctx: Vec<PolicyInputStep> = st.history.iter().copied().collect();
        ctx.push(PolicyInputStep {
            h: 0,
            rh: 0.0,
            ret: 50.0 - 0.8,
            state: s.to_vector(),
            action: [0.0; 2],
        });
        let want = f.predictor.predict_target(&ctx, cfg.horizon, cfg.eta).unwrap();
        let (_, tr) = st.plan_step(&s, 0.8, &models).unwrap();
        assert_eq!(tr.update, SpanUpdate::Reset);
        assert_eq!(tr.h, 30);
        assert_eq!(tr.rh, want);
    }
}

#[test]
fn flagged_states_feed_the_dummy_condition() {
    let f = fixture();
    let ix = index(&f, 0.5, Some(1.0));
    let models = PlannerModels {
        policy: &f.policy,
        index: Some(&ix),
        predictor: Some(&f.predictor),
    };
    let mut st = PlannerState::new(config(5, 0.5), 80.0);
    let steps = &f.trajs[2].steps;
    for (t, step) in steps.iter().take(12).enumerate() {
        let prev = if t == 0 { 0.0 } else { steps[t - 1].reward };
        let (a, tr) = st.plan_step(&step.env_state(), prev, &models).unwrap();
        assert!(tr.dummy && tr.flagged);
        assert!(st.history.iter().all(|s| s.h == 0 && s.rh == 0.0));
        // The numeric target alongside the sentinel must not matter.
        let mut ctx: Vec<PolicyInputStep> = st.history.iter().copied().collect();
        for s in &mut ctx {
            s.rh = 1234.5;
        }
        ctx.last_mut().unwrap().action = [0.0; 2];
        let b = f.policy.predict_action(&ctx).unwrap();
        assert_eq!((a.target_speed, a.target_steer), (b.target_speed, b.target_steer));
        if t > 0 {
            assert_eq!(tr.update, SpanUpdate::Reset);
        }
    }
}

#[test]
fn history_window_is_bounded() {
    let f = fixture();
    let ix = index(&f, 0.3, None);
    let models = PlannerModels {
        policy: &f.policy,
        index: Some(&ix),
        predictor: Some(&f.predictor),
    };
    let mut st = PlannerState::new(config(30, 0.3), 10.0);
    for (t, step) in f.trajs[0].steps.iter().enumerate().take(20) {
        st.plan_step(&step.env_state(), 0.1, &models).unwrap();
        assert_eq!(st.history.len(), (t + 1).min(5));
        assert_eq!(st.history.back().unwrap().state, step.state);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn targets_rise_with_the_percentile(
        traj in 0usize..12,
        start in 0usize..40,
        len in 1usize..8,
        h in 1usize..100,
        a in 0.01f64..0.99,
        b in 0.01f64..0.99,
    ) {
        thread_local! {
            static F: Fixture = fixture();
        }
        F.with(|f| {
            let seq = policy_inputs(&f.trajs[traj], None).unwrap();
            let ctx = &seq[start..start + len];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let tl = f.predictor.predict_target(ctx, h, lo).unwrap();
            let th = f.predictor.predict_target(ctx, h, hi).unwrap();
            assert!(tl <= th, "{tl} > {th}");
            let mid = f.predictor.predict_target(ctx, h, 0.5).unwrap();
            assert!((mid - f.predictor.predict(ctx, h).unwrap().mu).abs() < 1e-12);
        });
    }
}
