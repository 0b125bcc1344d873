use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unrest::env::*;
use unrest::policy::*;
use unrest::trajlog::*;

fn small_config() -> PolicyTrainConfig {
    PolicyTrainConfig {
        layers: 1,
        heads: 2,
        dim: 16,
        batch: 32,
        dropout: 0.0,
        ref_epochs: 5.0,
        ref_dataset_size: 1.0,
        iters_per_epoch: 40,
        ..PolicyTrainConfig::default()
    }
}

/// Episodes whose normalized actions are both `0.1 * R^h`, with `R^h` drawn
/// independently at every step.
fn synthetic(episodes: usize, len: usize, seed: u64) -> (Vec<Trajectory>, Vec<Vec<SegColumns>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajs = Vec::new();
    let mut cols = Vec::new();
    for e in 0..episodes {
        let mut steps = Vec::new();
        let mut c = Vec::new();
        for t in 0..len {
            let mut state = [0.0; STATE_DIM];
            for v in &mut state[..STATE_DIM - 1] {
                *v = rng.random_range(-1.0..1.0);
            }
            state[STATE_DIM - 1] = t as f64;
            let rh: f64 = rng.random_range(-5.0..5.0);
            let action = EnvAction::from_normalized([0.1 * rh, 0.1 * rh], 40.0).to_array();
            steps.push(StepRecord {
                state,
                action,
                reward: 1.0,
                terms: [1.0, 0.0, 0.0, 0.0, 0.0],
                infraction: None,
                reveal: false,
            });
            c.push(SegColumns {
                u: 0.0,
                flag: false,
                h: rng.random_range(1..=10),
                rh,
                ret: (len - t) as f64,
            });
        }
        trajs.push(Trajectory {
            meta: TrajectoryMeta {
                seed: e as u64,
                env_version: ENV_VERSION.into(),
                expert_version: EXPERT_VERSION.into(),
                success: true,
                route_completion: 1.0,
            },
            steps,
        });
        cols.push(c);
    }
    (trajs, cols)
}

#[test]
fn linear_map_from_truncated_return_is_recovered() {
    let (trajs, cols) = synthetic(60, 40, 1);
    let cfg = PolicyTrainConfig {
        ref_epochs: 60.0,
        ref_dataset_size: total_steps(&trajs) as f64,
        lr: 3e-3,
        ..small_config()
    };
    let (net, _) = train_policy(PolicyKind::Unrest, &trajs, Some(&cols), &cfg).unwrap();
    let (test, test_cols) = synthetic(10, 40, 99);
    let (mut err, mut n) = (0.0, 0usize);
    for (t, c) in test.iter().zip(&test_cols) {
        let seq = policy_inputs(t, Some(c)).unwrap();
        for (i, p) in net.predict_windows(&seq).unwrap().iter().enumerate() {
            let want = 0.1 * c[i].rh;
            err += (p[0] - want).abs() + (p[1] - want).abs();
            n += 2;
        }
    }
    let mae = err / n as f64;
    assert!(mae < 0.02, "mae {mae}");
}

#[test]
fn actions_depend_only_on_the_past() {
    let trajs = collect_expert(&EnvConfig::default(), &ExpertConfig::default(), 8, 0).unwrap();
    let cfg = PolicyTrainConfig {
        ref_epochs: 1.0,
        ref_dataset_size: total_steps(&trajs) as f64,
        iters_per_epoch: 5,
        ..small_config()
    };
    for kind in [PolicyKind::Unrest, PolicyKind::Dt, PolicyKind::Bc] {
        let cols: Vec<Vec<SegColumns>> = trajs
            .iter()
            .map(|t| {
                let r = discounted_returns(&t.rewards(), 1.0).unwrap();
                r.iter()
                    .map(|&ret| SegColumns {
                        u: 0.0,
                        flag: false,
                        h: 3,
                        rh: 0.3 * ret,
                        ret,
                    })
                    .collect()
            })
            .collect();
        let (net, _) = train_policy(kind, &trajs, Some(&cols), &cfg).unwrap();
        let seq = policy_inputs(&trajs[0], Some(&cols[0])).unwrap();
        let ctx = &seq[10..15];
        for t in 0..ctx.len() {
            let base = net.predict_normalized(&ctx[..=t]).unwrap();
            let mut moved = ctx[..=t].to_vec();
            moved[t].action = [moved[t].action[0] + 15.0, -moved[t].action[1]];
            assert_eq!(net.predict_normalized(&moved).unwrap(), base, "{kind}: own action leaked at {t}");
            let full = net.predict_windows(&seq[..15]).unwrap();
            let mut later = seq[..15].to_vec();
            for s in &mut later[11 + t..] {
                s.state[0] += 5.0;
                s.rh -= 1.0;
                s.ret += 2.0;
            }
            let shifted = net.predict_windows(&later).unwrap();
            assert_eq!(full[..11 + t], shifted[..11 + t], "{kind}: future leaked");
        }
    }
}

#[test]
fn training_loss_falls_over_five_epochs() {
    let trajs = collect_expert(&EnvConfig::default(), &ExpertConfig::default(), 20, 0).unwrap();
    let cfg = PolicyTrainConfig {
        ref_dataset_size: total_steps(&trajs) as f64,
        ..small_config()
    };
    for kind in [PolicyKind::Dt, PolicyKind::Bc] {
        let (_, logs) = train_policy(kind, &trajs, None, &cfg).unwrap();
        assert_eq!(logs.len(), 5);
        assert!(logs[4].train_loss < logs[0].train_loss, "{kind}: {logs:?}");
    }
}
