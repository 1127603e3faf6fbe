//! Evaluation metrics: discovered modes, empirical L1 distance to the exact
//! grid target, and variational bounds on `log Z`.

use std::collections::BTreeSet;

use rand::Rng;

use crate::continuous::{sample_backward_trajectory, trajectory_log_pb, EnergySpec, TargetSampler};
use crate::error::{ensure_finite, Error, Result};
use crate::grid::{log_sum_exp, GridEnv, GridForwardPolicy};
use crate::sde_policy::DriftPolicy;

/// Modes seen in any training sample so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModeTracker {
    discovered: BTreeSet<usize>,
    total: usize,
}

impl ModeTracker {
    pub fn new(total_modes: usize) -> Self {
        Self {
            discovered: BTreeSet::new(),
            total: total_modes,
        }
    }

    pub fn for_grid(env: &GridEnv, cap: u64) -> Result<Self> {
        Ok(Self::new(env.mode_set(cap)?.len()))
    }

    pub fn count(&self) -> usize {
        self.discovered.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count() as f64 / self.total as f64
        }
    }

    pub fn discovered(&self) -> impl Iterator<Item = usize> + '_ {
        self.discovered.iter().copied()
    }

    /// Records the mode states among `terminals`.
    pub fn count_modes(&mut self, env: &GridEnv, terminals: impl IntoIterator<Item = usize>) {
        for x in terminals {
            if env.is_mode(x) {
                self.discovered.insert(x);
            }
        }
    }
}

/// `(1/|X|) Σ |p(x) - q(x)|` over two probability tables.
pub fn l1_between(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            context: "L1 tables",
            expected: p.len(),
            actual: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::Empty("L1 of empty tables"));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Empirical terminal frequencies of fresh rollouts.
pub fn empirical_distribution<P, R>(env: &GridEnv, policy: &P, n_samples: usize, rng: &mut R) -> Result<Vec<f64>>
where
    P: GridForwardPolicy + ?Sized,
    R: Rng + ?Sized,
{
    if n_samples == 0 {
        return Err(Error::Empty("L1 needs at least one sample"));
    }
    let mut counts = vec![0u64; env.n_states()];
    let mut left = n_samples;
    while left > 0 {
        let chunk = left.min(4096);
        for t in env.sample_trajectories(policy, chunk, 0.0, rng)? {
            counts[t.terminal()] += 1;
        }
        left -= chunk;
    }
    Ok(counts.into_iter().map(|c| c as f64 / n_samples as f64).collect())
}

/// L1 distance between the empirical distribution of `n_samples` fresh
/// rollouts and the exact normalized reward.
pub fn l1_distance<P, R>(env: &GridEnv, policy: &P, n_samples: usize, cap: u64, rng: &mut R) -> Result<f64>
where
    P: GridForwardPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let target = env.exact_target(cap)?;
    let p = empirical_distribution(env, policy, n_samples, rng)?;
    l1_between(&p, &target)
}

/// Mean of log-weights `log R + log P_B - log P_F`.
pub fn elbo(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::Empty("bound of no samples"));
    }
    ensure_finite("ELBO", log_weights.iter().sum::<f64>() / log_weights.len() as f64)
}

/// `log mean exp` of the same log-weights.
pub fn elbo_is(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::Empty("bound of no samples"));
    }
    ensure_finite("ELBO-IS", log_sum_exp(log_weights) - (log_weights.len() as f64).ln())
}

/// Mean log-weight of trajectories drawn backward from target samples.
pub fn eubo(target_log_weights: &[f64]) -> Result<f64> {
    if target_log_weights.is_empty() {
        return Err(Error::Empty("bound of no samples"));
    }
    ensure_finite("EUBO", target_log_weights.iter().sum::<f64>() / target_log_weights.len() as f64)
}

/// Produces log-weights of policy samples and of target samples.
pub trait LogWeightSource {
    /// Log-weights of `m` trajectories sampled from the forward policy.
    fn policy_log_weights(&self, m: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;
    /// Log-weights of `m` target samples completed by the backward policy.
    fn target_log_weights(&self, m: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;
}

/// Grid log-weights under a forward policy, with exact target sampling.
pub struct GridBounds<'a, P: ?Sized> {
    env: &'a GridEnv,
    policy: &'a P,
    target_cdf: Vec<f64>,
}

impl<'a, P: GridForwardPolicy + ?Sized> GridBounds<'a, P> {
    pub fn new(env: &'a GridEnv, policy: &'a P, cap: u64) -> Result<Self> {
        let mut acc = 0.0;
        let target_cdf = env
            .exact_target(cap)?
            .into_iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { env, policy, target_cdf })
    }

    fn weight(&self, t: &crate::grid::GridTrajectory) -> Result<f64> {
        let lpf = self.env.trajectory_log_pf(self.policy, t)?;
        let lpb = self.env.uniform_backward_logprob(t)?;
        ensure_finite("log-weight", self.env.log_reward_of(t.terminal()) + lpb - lpf)
    }
}

impl<P: GridForwardPolicy + ?Sized> LogWeightSource for GridBounds<'_, P> {
    fn policy_log_weights(&self, m: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        self.env
            .sample_trajectories(self.policy, m, 0.0, rng)?
            .iter()
            .map(|t| self.weight(t))
            .collect()
    }

    fn target_log_weights(&self, m: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let total = *self.target_cdf.last().expect("non-empty grid");
        (0..m)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let x = self.target_cdf.partition_point(|&c| c <= u).min(self.target_cdf.len() - 1);
                let t = self.env.sample_backward(x, rng)?;
                self.weight(&t)
            })
            .collect()
    }
}

/// Diffusion-sampler log-weights with an exact target sampler.
pub struct SdeBounds<'a> {
    policy: &'a DriftPolicy,
    energy: EnergySpec,
    sampler: TargetSampler,
}

impl<'a> SdeBounds<'a> {
    pub fn new(policy: &'a DriftPolicy, energy: EnergySpec) -> Self {
        Self {
            policy,
            energy,
            sampler: energy.target_sampler(),
        }
    }

    fn weights(&self, trajs: &[crate::continuous::ContinuousTrajectory]) -> Result<Vec<f64>> {
        let cfg = self.policy.config();
        let lpf = self.policy.log_pf(trajs)?;
        trajs
            .iter()
            .zip(lpf)
            .map(|(t, f)| {
                let w = self.energy.log_reward(t.terminal())? + trajectory_log_pb(cfg, t)? - f;
                ensure_finite("log-weight", w)
            })
            .collect()
    }
}

impl LogWeightSource for SdeBounds<'_> {
    fn policy_log_weights(&self, m: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(m);
        let mut left = m;
        while left > 0 {
            let chunk = left.min(500);
            let trajs = self.policy.sample(chunk, 0.0, rng)?;
            out.extend(self.weights(&trajs)?);
            left -= chunk;
        }
        Ok(out)
    }

    fn target_log_weights(&self, m: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let cfg = self.policy.config();
        let mut out = Vec::with_capacity(m);
        let mut left = m;
        while left > 0 {
            let chunk = left.min(500);
            let trajs = (0..chunk)
                .map(|_| {
                    let x = self.sampler.sample(rng);
                    sample_backward_trajectory(cfg, &x, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            out.extend(self.weights(&trajs)?);
            left -= chunk;
        }
        Ok(out)
    }
}

/// One evaluation checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub n_modes: usize,
    pub l1: Option<f64>,
    pub elbo: Option<f64>,
    pub elbo_is: Option<f64>,
    pub eubo: Option<f64>,
    pub l1_samples: usize,
    pub bound_samples: usize,
}

/// ELBO, ELBO-IS and EUBO from `m` policy and `m` target samples.
pub fn bounds<S: LogWeightSource + ?Sized>(source: &S, m: usize, rng: &mut dyn rand::RngCore) -> Result<(f64, f64, f64)> {
    let fwd = source.policy_log_weights(m, rng)?;
    let tgt = source.target_log_weights(m, rng)?;
    Ok((elbo(&fwd)?, elbo_is(&fwd)?, eubo(&tgt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridConfig, TabularPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_examples() {
        let uniform = vec![1.0 / 16.0; 16];
        let mut point = vec![0.0; 16];
        point[3] = 1.0;
        let got = l1_between(&point, &uniform).unwrap();
        assert!((got - 2.0 * (15.0 / 16.0) / 16.0).abs() < 1e-15);
        assert_eq!(l1_between(&uniform, &uniform).unwrap(), 0.0);
        assert_eq!(l1_between(&point, &uniform).unwrap(), l1_between(&uniform, &point).unwrap());
        assert!(l1_between(&point, &uniform[..3]).is_err());
    }

    #[test]
    fn tracker_counts_distinct_modes() {
        let env = GridEnv::new(GridConfig::new(2, 128)).unwrap();
        let mut tr = ModeTracker::for_grid(&env, 1 << 20).unwrap();
        assert_eq!(tr.total(), 676);
        tr.count_modes(&env, []);
        assert_eq!(tr.count(), 0);
        let mode = env.id_of(&[13, 13]).unwrap();
        let plain = env.id_of(&[63, 63]).unwrap();
        tr.count_modes(&env, [mode, mode, plain, 0]);
        assert_eq!(tr.count(), 1);
        tr.count_modes(&env, env.mode_set(1 << 20).unwrap());
        assert_eq!(tr.count(), 676);
        assert_eq!(tr.fraction(), 1.0);
    }

    #[test]
    fn bound_identities() {
        let w = [0.7; 5];
        assert!((elbo(&w).unwrap() - 0.7).abs() < 1e-15);
        assert!((elbo_is(&w).unwrap() - 0.7).abs() < 1e-15);
        let v = [0.1, -2.0, 3.0];
        assert!(elbo_is(&v).unwrap() >= elbo(&v).unwrap());
        assert!(elbo(&[]).is_err());
    }

    #[test]
    fn oracle_bounds_equal_log_partition() {
        let env = GridEnv::new(GridConfig::new(2, 8)).unwrap();
        let oracle = env.exact_flow_policy(1000).unwrap();
        let log_z = env.log_partition(1000).unwrap();
        let src = GridBounds::new(&env, &oracle, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (lo, lo_is, hi) = bounds(&src, 500, &mut rng).unwrap();
        for v in [lo, lo_is, hi] {
            assert!((v - log_z).abs() < 1e-9, "{v} vs {log_z}");
        }
    }

    #[test]
    fn oracle_l1_is_within_sampling_noise() {
        let env = GridEnv::new(GridConfig::new(2, 16)).unwrap();
        let oracle = env.exact_flow_policy(1000).unwrap();
        let target = env.exact_target(1000).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l1 = l1_distance(&env, &oracle, n, 1000, &mut rng).unwrap();
        let noise: f64 = target.iter().map(|p| (p * (1.0 - p)).sqrt()).sum::<f64>() / (n as f64).sqrt() / target.len() as f64;
        assert!(l1 < 3.0 * noise, "{l1} vs {noise}");
    }

    /// Single-step toy with two terminal objects.
    struct TwoModeToy {
        policy_second: f64,
    }

    impl TwoModeToy {
        fn weight(&self, x: usize) -> f64 {
            let q = if x == 1 { self.policy_second } else { 1.0 - self.policy_second };
            0.0 - q.ln()
        }
    }

    impl LogWeightSource for TwoModeToy {
        fn policy_log_weights(&self, m: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
            Ok((0..m)
                .map(|_| self.weight(usize::from(rng.random::<f64>() < self.policy_second)))
                .collect())
        }

        fn target_log_weights(&self, m: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
            Ok((0..m).map(|_| self.weight(usize::from(rng.random::<bool>()))).collect())
        }
    }

    #[test]
    fn eubo_grows_as_a_mode_is_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut last = f64::NEG_INFINITY;
        for q in [0.5, 0.1, 1e-2, 1e-4, 1e-8] {
            let toy = TwoModeToy { policy_second: q };
            let e = eubo(&toy.target_log_weights(20_000, &mut rng).unwrap()).unwrap();
            assert!(e > last, "{e} <= {last}");
            last = e;
        }
        // log Z = log 2
        assert!(last > 2f64.ln() + 5.0);
    }

    #[test]
    fn elbo_below_eubo_over_repetitions() {
        let env = GridEnv::new(GridConfig::new(2, 6)).unwrap();
        // a deliberately wrong policy: uniform over legal actions
        let na = env.n_actions();
        let mut log_pf = vec![f64::NEG_INFINITY; env.n_states() * na];
        for s in 0..env.n_states() {
            let legal: Vec<usize> = (0..na).filter(|&a| env.legal(s, a)).collect();
            for &a in &legal {
                log_pf[s * na + a] = -(legal.len() as f64).ln();
            }
        }
        let pol = TabularPolicy::from_log_probs(env.dim(), log_pf);
        let src = GridBounds::new(&env, &pol, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let log_z = env.log_partition(1000).unwrap();
        let mut lo_sum = 0.0;
        let mut hi_sum = 0.0;
        for _ in 0..20 {
            let (lo, _, hi) = bounds(&src, 200, &mut rng).unwrap();
            lo_sum += lo;
            hi_sum += hi;
        }
        assert!(lo_sum / 20.0 < log_z && log_z < hi_sum / 20.0);
    }
}
