use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gfn_teacher::exploration::{BehaviorSchedule, PriorityKey, ReplayBuffer, ReplayEntry, Source};
use gfn_teacher::grid::{GridConfig, GridEnv};
use gfn_teacher::grid_policy::GridPolicy;
use gfn_teacher::local_search::{grid_proposals, LocalSearchConfig};
use gfn_teacher::metrics::{elbo, elbo_is, l1_between};
use gfn_teacher::nn::{Activation, AdamConfig, LearningRates};
use gfn_teacher::teacher::{teacher_log_reward_tb, TeacherRewardConfig};

fn entry(log_reward: f64) -> ReplayEntry<u32> {
    ReplayEntry {
        payload: 0,
        log_reward,
        teacher_log_reward: 0.0,
    }
}

proptest! {
    #[test]
    fn schedule_is_a_pure_function_of_round(s in 0u32..4, t in 0u32..4, b in 0u32..4, round in 0u64..10_000) {
        prop_assume!(s + t + b > 0);
        let a = BehaviorSchedule::new(s, t, b).unwrap();
        let c: BehaviorSchedule = a.to_string().parse().unwrap();
        prop_assert_eq!(a.select_source(round, true), c.select_source(round, true));
        prop_assert_eq!(a.select_source(round, true), a.select_source(round + a.period(), true));
        prop_assert_ne!(a.select_source(round, false), Source::Buffer);
    }

    #[test]
    fn buffer_keeps_the_newest_entries(cap in 1usize..40, batches in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 0..20), 1..12)) {
        let mut buf = ReplayBuffer::new(cap, PriorityKey::Reward).unwrap();
        let mut inserted = 0u64;
        for batch in &batches {
            buf.insert(batch.iter().map(|&r| entry(r)));
            inserted += batch.len() as u64;
            prop_assert!(buf.len() <= cap);
            prop_assert_eq!(buf.len() as u64, inserted.min(cap as u64));
            let idx: Vec<u64> = buf.entries().map(|e| e.insertion_index).collect();
            let first = inserted - idx.len() as u64;
            prop_assert_eq!(idx, (first..inserted).collect::<Vec<_>>());
        }
    }

    #[test]
    fn teacher_reward_prefers_positive_and_larger_discrepancies(d in 1e-3f64..50.0, bump in 1e-3f64..5.0, lr in -20.0f64..5.0) {
        let cfg = TeacherRewardConfig::default();
        let pos = teacher_log_reward_tb(&[d], lr, &cfg).unwrap();
        let neg = teacher_log_reward_tb(&[-d], lr, &cfg).unwrap();
        prop_assert!(pos > neg);
        prop_assert!(teacher_log_reward_tb(&[d + bump], lr, &cfg).unwrap() > pos);
        prop_assert!(teacher_log_reward_tb(&[-d - bump], lr, &cfg).unwrap() > neg);
    }

    #[test]
    fn elbo_is_never_below_elbo(w in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        prop_assert!(elbo_is(&w).unwrap() >= elbo(&w).unwrap() - 1e-12);
    }

    #[test]
    fn l1_is_a_symmetric_distance(p in prop::collection::vec(0.0f64..1.0, 1..32), seed in 0u64..1000) {
        let mut q = p.clone();
        q.rotate_left((seed as usize) % p.len());
        prop_assert_eq!(l1_between(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(l1_between(&p, &q).unwrap(), l1_between(&q, &p).unwrap());
        let bound = p.iter().zip(&q).map(|(a, b)| a + b).sum::<f64>() / p.len() as f64;
        prop_assert!(l1_between(&p, &q).unwrap() <= bound + 1e-12);
    }
}

fn policy(env: &GridEnv, seed: u64) -> GridPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GridPolicy::new(env, &[16], Activation::LeakyRelu, false, LearningRates::uniform(1e-3), AdamConfig::default(), &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn epsilon_rollouts_record_the_unperturbed_log_density(seed in 0u64..1000, eps in 0.0f64..1.0) {
        let env = GridEnv::new(GridConfig::new(3, 5)).unwrap();
        let pol = policy(&env, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let trajs = env.sample_trajectories(&pol, 8, eps, &mut rng).unwrap();
        let log_r: Vec<f64> = trajs.iter().map(|t| env.log_reward_of(t.terminal())).collect();
        let deltas = pol.tb_deltas(&env, &trajs, &log_r).unwrap();
        for ((t, &lr), d) in trajs.iter().zip(&log_r).zip(deltas) {
            let expected = lr + env.uniform_backward_logprob(t).unwrap() - pol.log_z() - env.trajectory_log_pf(&pol, t).unwrap();
            prop_assert!((d - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn local_search_proposals_are_legal_trajectories(seed in 0u64..1000, ratio in 0.05f64..0.95) {
        let env = GridEnv::new(GridConfig::new(2, 9)).unwrap();
        let pol = policy(&env, seed);
        let cfg = LocalSearchConfig { backtrack_ratio: ratio, ..LocalSearchConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = env.sample_trajectories(&pol, 6, 0.0, &mut rng).unwrap();
        let props = grid_proposals(&env, &pol, &start, &cfg, &mut rng).unwrap();
        prop_assert_eq!(props.len(), start.len());
        for p in &props {
            prop_assert!(env.validate_trajectory(p).is_ok());
        }
    }
}
