//! Diffusion-sampler environment: a discretized SDE on `[0, 1]` with a
//! Gaussian forward kernel, a Brownian-bridge backward kernel pinned at the
//! origin, and two analytic target energies.
//!
//! Time is addressed by step index `i` in `0..=T`, with `t = i / T`.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Reference log-partition of the 32-dimensional Manywell density.
pub const MANYWELL_LOG_Z: f64 = 164.695_675_3;

/// Number of sinusoidal time features fed to drift networks.
pub const TIME_FEATURES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub dim: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub sigma: f64,
}

fn default_steps() -> usize {
    100
}

impl SdeConfig {
    pub fn new(dim: usize, steps: usize, sigma: f64) -> Result<Self> {
        let cfg = Self { dim, steps, sigma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn for_energy(energy: EnergySpec) -> Self {
        let sigma = match energy {
            EnergySpec::Gmm25 => 5.0f64.sqrt(),
            EnergySpec::Manywell => 1.0,
        };
        Self {
            dim: energy.dim(),
            steps: default_steps(),
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.steps < 2 || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sde needs dim >= 1, steps >= 2, sigma > 0 (got {}, {}, {})",
                self.dim, self.steps, self.sigma
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 / self.steps as f64
    }

    /// Variance `σ²Δt` of one forward step.
    pub fn step_variance(&self) -> f64 {
        self.sigma * self.sigma * self.dt()
    }
}

/// Points `x_0, x_Δt, …, x_1` stored row-major, `x_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTrajectory {
    dim: usize,
    points: Vec<f64>,
}

impl ContinuousTrajectory {
    pub fn from_points(cfg: &SdeConfig, points: Vec<f64>) -> Result<Self> {
        ensure_dim("trajectory points", (cfg.steps + 1) * cfg.dim, points.len())?;
        if points[..cfg.dim].iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidTrajectory("trajectory must start at the origin".into()));
        }
        Ok(Self { dim: cfg.dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, step: usize) -> &[f64] {
        &self.points[step * self.dim..(step + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.point(self.len() - 1)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergySpec {
    /// Equal-weight mixture of 25 Gaussians (variance 0.3) centred on
    /// `{-10, -5, 0, 5, 10}²`, normalized.
    Gmm25,
    /// Product of 16 two-dimensional double wells.
    Manywell,
}

impl EnergySpec {
    pub fn dim(self) -> usize {
        match self {
            EnergySpec::Gmm25 => 2,
            EnergySpec::Manywell => 32,
        }
    }

    /// Known log-partition of `exp(log_reward)`.
    pub fn log_partition(self) -> f64 {
        match self {
            EnergySpec::Gmm25 => 0.0,
            EnergySpec::Manywell => MANYWELL_LOG_Z,
        }
    }

    pub fn log_reward(self, x: &[f64]) -> Result<f64> {
        ensure_dim("energy input", self.dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("energy input {x:?}")));
        }
        Ok(match self {
            EnergySpec::Gmm25 => gmm25_log_density(x),
            EnergySpec::Manywell => x
                .chunks(2)
                .map(|p| double_well_log_density(p[0], p[1]))
                .sum(),
        })
    }

    /// Exact sampler for the normalized target.
    pub fn target_sampler(self) -> TargetSampler {
        match self {
            EnergySpec::Gmm25 => TargetSampler::Gmm25,
            EnergySpec::Manywell => TargetSampler::Manywell(DoubleWellSampler::new(100_000)),
        }
    }
}

const GMM_VAR: f64 = 0.3;

fn gmm25_means() -> impl Iterator<Item = (f64, f64)> {
    const C: [f64; 5] = [-10.0, -5.0, 0.0, 5.0, 10.0];
    C.iter().flat_map(|&a| C.iter().map(move |&b| (a, b)))
}

fn gmm25_log_density(x: &[f64]) -> f64 {
    let norm = -(2.0 * PI * GMM_VAR).ln() - 25f64.ln();
    let terms: Vec<f64> = gmm25_means()
        .map(|(a, b)| {
            let d2 = (x[0] - a).powi(2) + (x[1] - b).powi(2);
            -d2 / (2.0 * GMM_VAR)
        })
        .collect();
    norm + crate::grid::log_sum_exp(&terms)
}

#[inline]
fn double_well_log_density(a: f64, b: f64) -> f64 {
    -a.powi(4) + 6.0 * a * a + 0.5 * a - 0.5 * b * b
}

/// Samples one 2D double-well block: the second coordinate is standard
/// normal, the first is drawn by inverse CDF from a tabulation of
/// `exp(-a⁴ + 6a² + 0.5a)` on `[-4, 4]`.
#[derive(Debug, Clone)]
pub struct DoubleWellSampler {
    grid: Vec<f64>,
    cdf: Vec<f64>,
}

impl DoubleWellSampler {
    pub fn new(points: usize) -> Self {
        let (lo, hi) = (-4.0, 4.0);
        let h = (hi - lo) / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|i| lo + i as f64 * h).collect();
        let dens: Vec<f64> = grid.iter().map(|&a| double_well_log_density(a, 0.0).exp()).collect();
        let mut cdf = vec![0.0; points];
        for i in 1..points {
            cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * h;
        }
        let total = cdf[points - 1];
        for c in &mut cdf {
            *c /= total;
        }
        Self { grid, cdf }
    }

    pub fn sample_first<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let k = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.grid[k - 1] + frac * (self.grid[k] - self.grid[k - 1])
    }
}

#[derive(Debug, Clone)]
pub enum TargetSampler {
    Gmm25,
    Manywell(DoubleWellSampler),
}

impl TargetSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            TargetSampler::Gmm25 => {
                let k = rng.random_range(0..25);
                let (a, b) = gmm25_means().nth(k).expect("25 components");
                let sd = GMM_VAR.sqrt();
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                vec![a + sd * z0, b + sd * z1]
            }
            TargetSampler::Manywell(block) => {
                let mut x = Vec::with_capacity(32);
                for _ in 0..16 {
                    x.push(block.sample_first(rng));
                    x.push(rng.sample(StandardNormal));
                }
                x
            }
        }
    }
}

fn gaussian_logpdf(x: &[f64], mean: impl Iterator<Item = f64>, var: f64) -> f64 {
    let mut q = 0.0;
    for (xi, mi) in x.iter().zip(mean) {
        q += (xi - mi).powi(2);
    }
    -0.5 * x.len() as f64 * (LN_2PI + var.ln()) - q / (2.0 * var)
}

/// `log N(x_next; x_t + u·Δt, σ²Δt·I)` for the move out of step `step`.
pub fn forward_logprob(cfg: &SdeConfig, drift: &[f64], x_t: &[f64], x_next: &[f64], step: usize) -> Result<f64> {
    ensure_dim("drift", cfg.dim, drift.len())?;
    ensure_dim("x_t", cfg.dim, x_t.len())?;
    ensure_dim("x_next", cfg.dim, x_next.len())?;
    if step >= cfg.steps {
        return Err(Error::InvalidState(format!("no forward move out of the final step {step}")));
    }
    let dt = cfg.dt();
    Ok(gaussian_logpdf(
        x_next,
        x_t.iter().zip(drift).map(|(x, u)| x + u * dt),
        cfg.step_variance(),
    ))
}

pub fn forward_sample<R: Rng + ?Sized>(cfg: &SdeConfig, drift: &[f64], x_t: &[f64], step: usize, rng: &mut R) -> Result<Vec<f64>> {
    ensure_dim("drift", cfg.dim, drift.len())?;
    ensure_dim("x_t", cfg.dim, x_t.len())?;
    if step >= cfg.steps {
        return Err(Error::InvalidState(format!("no forward move out of the final step {step}")));
    }
    let dt = cfg.dt();
    let sd = cfg.step_variance().sqrt();
    Ok(x_t
        .iter()
        .zip(drift)
        .map(|(x, u)| {
            let z: f64 = rng.sample(StandardNormal);
            x + u * dt + sd * z
        })
        .collect())
}

/// Mean scale and variance of the bridge kernel out of step `step >= 2`.
fn bridge_params(cfg: &SdeConfig, step: usize) -> (f64, f64) {
    let ratio = (step - 1) as f64 / step as f64;
    (ratio, ratio * cfg.step_variance())
}

/// Log-density of the backward move from step `step` to `step - 1`.
/// The move into the origin is a point mass and contributes `0`.
pub fn backward_logprob(cfg: &SdeConfig, x_t: &[f64], x_prev: &[f64], step: usize) -> Result<f64> {
    ensure_dim("x_t", cfg.dim, x_t.len())?;
    ensure_dim("x_prev", cfg.dim, x_prev.len())?;
    if step == 0 || step > cfg.steps {
        return Err(Error::InvalidState(format!("no backward move out of step {step}")));
    }
    if step == 1 {
        if x_prev.iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidTrajectory("backward move into t = 0 must reach the origin".into()));
        }
        return Ok(0.0);
    }
    let (scale, var) = bridge_params(cfg, step);
    Ok(gaussian_logpdf(x_prev, x_t.iter().map(|x| scale * x), var))
}

pub fn backward_sample<R: Rng + ?Sized>(cfg: &SdeConfig, x_t: &[f64], step: usize, rng: &mut R) -> Result<Vec<f64>> {
    ensure_dim("x_t", cfg.dim, x_t.len())?;
    if step == 0 || step > cfg.steps {
        return Err(Error::InvalidState(format!("no backward move out of step {step}")));
    }
    if step == 1 {
        return Ok(vec![0.0; cfg.dim]);
    }
    let (scale, var) = bridge_params(cfg, step);
    let sd = var.sqrt();
    Ok(x_t
        .iter()
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            scale * x + sd * z
        })
        .collect())
}

/// Samples a full bridge path ending at `x1`.
pub fn sample_backward_trajectory<R: Rng + ?Sized>(cfg: &SdeConfig, x1: &[f64], rng: &mut R) -> Result<ContinuousTrajectory> {
    ensure_dim("terminal point", cfg.dim, x1.len())?;
    let n = cfg.steps;
    let mut points = vec![0.0; (n + 1) * cfg.dim];
    points[n * cfg.dim..].copy_from_slice(x1);
    for step in (1..=n).rev() {
        let prev = backward_sample(cfg, &points[step * cfg.dim..(step + 1) * cfg.dim], step, rng)?;
        points[(step - 1) * cfg.dim..step * cfg.dim].copy_from_slice(&prev);
    }
    ContinuousTrajectory::from_points(cfg, points)
}

pub fn trajectory_log_pb(cfg: &SdeConfig, traj: &ContinuousTrajectory) -> Result<f64> {
    ensure_dim("trajectory dim", cfg.dim, traj.dim())?;
    ensure_dim("trajectory length", cfg.steps + 1, traj.len())?;
    (1..=cfg.steps).map(|s| backward_logprob(cfg, traj.point(s), traj.point(s - 1), s)).sum()
}

/// Something that maps `(x_t, t)` rows to drift vectors.
pub trait DriftModel {
    /// `points` is row-major `(rows, dim)`; `steps[r]` is the step index of
    /// row `r`. Returns row-major `(rows, dim)` drifts.
    fn drifts(&self, cfg: &SdeConfig, points: &[f64], steps: &[usize]) -> Result<Vec<f64>>;
}

/// `(log P_F(τ), log P_B(τ | x_1))`.
pub fn trajectory_logprobs<M: DriftModel + ?Sized>(cfg: &SdeConfig, model: &M, traj: &ContinuousTrajectory) -> Result<(f64, f64)> {
    ensure_dim("trajectory length", cfg.steps + 1, traj.len())?;
    let n = cfg.steps;
    let steps: Vec<usize> = (0..n).collect();
    let drift = model.drifts(cfg, &traj.points()[..n * cfg.dim], &steps)?;
    let mut log_pf = 0.0;
    for s in 0..n {
        log_pf += forward_logprob(cfg, &drift[s * cfg.dim..(s + 1) * cfg.dim], traj.point(s), traj.point(s + 1), s)?;
    }
    let log_pb = trajectory_log_pb(cfg, traj)?;
    if !(log_pf.is_finite() && log_pb.is_finite()) {
        return Err(Error::NonFinite(format!("trajectory log-probabilities ({log_pf}, {log_pb})")));
    }
    Ok((log_pf, log_pb))
}

/// Sinusoidal features `sin(ω_k t), cos(ω_k t)` with frequencies spaced
/// evenly over `[0.1, 100]`. The frequencies are not multiples of `2π`, so
/// no two times in `[0, 1]` share an embedding.
pub fn time_features(t: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let w = (0.1 + (100.0 - 0.1) * frac) * t;
        out[k] = w.sin();
        out[half + k] = w.cos();
    }
}

/// Writes `trajectory, t, x0, x1, …` rows.
pub fn write_trajectories_csv<W: Write>(cfg: &SdeConfig, trajs: &[ContinuousTrajectory], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["trajectory".to_string(), "t".to_string()];
    header.extend((0..cfg.dim).map(|a| format!("x{a}")));
    w.write_record(&header)?;
    for (k, traj) in trajs.iter().enumerate() {
        for s in 0..traj.len() {
            let mut row = vec![k.to_string(), format!("{:?}", cfg.time(s))];
            row.extend(traj.point(s).iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gmm25_at_origin() {
        let got = EnergySpec::Gmm25.log_reward(&[0.0, 0.0]).unwrap();
        let expected = (1.0f64 / 25.0).ln() - (2.0 * PI * 0.3).ln();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn gmm25_integrates_to_one() {
        let n = 600;
        let h = 30.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-15.0 + (i as f64 + 0.5) * h, -15.0 + (j as f64 + 0.5) * h];
                total += EnergySpec::Gmm25.log_reward(&x).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn manywell_at_zero_and_partition() {
        assert_eq!(EnergySpec::Manywell.log_reward(&[0.0; 32]).unwrap(), 0.0);
        // Simpson quadrature of one block
        let n = 20_000;
        let h = 12.0 / n as f64;
        let f = |a: f64| double_well_log_density(a, 0.0).exp();
        let mut s = f(-6.0) + f(6.0);
        for i in 1..n {
            s += f(-6.0 + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let block = (s * h / 3.0).ln() + 0.5 * (2.0 * PI).ln();
        assert!((16.0 * block - MANYWELL_LOG_Z).abs() < 1e-6, "{}", 16.0 * block);
    }

    #[test]
    fn non_finite_energy_input() {
        assert!(EnergySpec::Gmm25.log_reward(&[f64::NAN, 0.0]).is_err());
        assert!(EnergySpec::Manywell.log_reward(&[0.0; 3]).is_err());
    }

    #[test]
    fn forward_logprob_examples() {
        let cfg = SdeConfig::new(2, 100, 5f64.sqrt()).unwrap();
        let x = [0.3, -1.0];
        let u = [2.0, 1.0];
        let mean = [0.3 + 0.02, -1.0 + 0.01];
        let lp = forward_logprob(&cfg, &u, &x, &mean, 3).unwrap();
        let expected = -(2.0 / 2.0) * (2.0 * PI * 5.0 * 0.01).ln();
        assert!((lp - expected).abs() < 1e-12);

        // σ²Δt = 1, one coordinate off by one
        let unit = SdeConfig::new(1, 2, 2f64.sqrt()).unwrap();
        let lp = forward_logprob(&unit, &[0.0], &[0.0], &[1.0], 0).unwrap();
        assert!((lp - (-0.5 - 0.5 * (2.0 * PI).ln())).abs() < 1e-12);
        assert!(forward_logprob(&unit, &[0.0], &[0.0], &[1.0], 2).is_err());
    }

    #[test]
    fn forward_sample_mean() {
        let cfg = SdeConfig::new(1, 10, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| forward_sample(&cfg, &[4.0], &[1.0], 2, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        let se = (cfg.step_variance() / n as f64).sqrt();
        assert!((mean - 1.4).abs() < 4.0 * se);
    }

    #[test]
    fn bridge_examples() {
        let cfg = SdeConfig::new(2, 10, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(backward_sample(&cfg, &[3.0, -2.0], 1, &mut rng).unwrap(), vec![0.0, 0.0]);
        assert_eq!(backward_logprob(&cfg, &[3.0, -2.0], &[0.0, 0.0], 1).unwrap(), 0.0);
        assert!(backward_logprob(&cfg, &[3.0, -2.0], &[0.1, 0.0], 1).is_err());
        assert!(backward_logprob(&cfg, &[3.0, -2.0], &[0.1, 0.0], 0).is_err());
        let (scale, var) = bridge_params(&cfg, 2);
        assert_eq!(scale, 0.5);
        assert!((var - 0.5 * 1.5 * 1.5 * 0.1).abs() < 1e-15);
        let traj = sample_backward_trajectory(&cfg, &[3.0, -2.0], &mut rng).unwrap();
        assert_eq!(traj.point(0), &[0.0, 0.0]);
        assert_eq!(traj.terminal(), &[3.0, -2.0]);
    }

    #[test]
    fn bridge_is_markov_consistent() {
        // Two steps on the grid of 2T compose to one step on the grid of T.
        let coarse = SdeConfig::new(1, 10, 1.3).unwrap();
        let fine = SdeConfig::new(1, 20, 1.3).unwrap();
        for step in 2..=10 {
            let (a1, v1) = bridge_params(&fine, 2 * step);
            let (a2, v2) = bridge_params(&fine, 2 * step - 1);
            let (a, v) = bridge_params(&coarse, step);
            assert!((a1 * a2 - a).abs() < 1e-10);
            assert!((a2 * a2 * v1 + v2 - v).abs() < 1e-10);
        }
    }

    struct ConstDrift(f64);

    impl DriftModel for ConstDrift {
        fn drifts(&self, cfg: &SdeConfig, points: &[f64], steps: &[usize]) -> Result<Vec<f64>> {
            assert_eq!(points.len(), steps.len() * cfg.dim);
            Ok(vec![self.0; points.len()])
        }
    }

    #[test]
    fn two_step_trajectory_by_hand() {
        let cfg = SdeConfig::new(1, 2, 1.0).unwrap();
        let traj = ContinuousTrajectory::from_points(&cfg, vec![0.0, 0.4, 1.1]).unwrap();
        let (lpf, lpb) = trajectory_logprobs(&cfg, &ConstDrift(1.0), &traj).unwrap();
        let norm = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
        let pf = norm(0.4, 0.5, 0.5) * norm(1.1, 0.9, 0.5);
        let pb = norm(0.4, 0.55, 0.25);
        assert!((lpf - pf.ln()).abs() < 1e-12);
        assert!((lpb - pb.ln()).abs() < 1e-12);
        assert_eq!(trajectory_logprobs(&cfg, &ConstDrift(1.0), &traj).unwrap(), (lpf, lpb));
    }

    #[test]
    fn sigma_scaling_shifts_normalizer() {
        let a = SdeConfig::new(3, 10, 1.0).unwrap();
        let b = SdeConfig::new(3, 10, 2.0).unwrap();
        let x = [0.1, 0.2, 0.3];
        let la = forward_logprob(&a, &[0.0; 3], &x, &x, 0).unwrap();
        let lb = forward_logprob(&b, &[0.0; 3], &x, &x, 0).unwrap();
        assert!((lb - la + 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn trajectory_must_start_at_origin() {
        let cfg = SdeConfig::new(1, 2, 1.0).unwrap();
        assert!(ContinuousTrajectory::from_points(&cfg, vec![0.1, 0.4, 1.1]).is_err());
        assert!(ContinuousTrajectory::from_points(&cfg, vec![0.0, 0.4]).is_err());
    }

    #[test]
    fn time_grid_is_exact() {
        let cfg = SdeConfig::new(1, 100, 1.0).unwrap();
        assert_eq!(cfg.time(100), 1.0);
        assert_eq!(cfg.time(37), 37.0 / 100.0);
    }

    #[test]
    fn time_embeddings_separate_start_and_end() {
        let cfg = SdeConfig::new(1, 100, 1.0).unwrap();
        let emb: Vec<Vec<f64>> = (0..=100)
            .map(|s| {
                let mut out = vec![0.0; TIME_FEATURES];
                time_features(cfg.time(s), &mut out);
                out
            })
            .collect();
        for a in 0..emb.len() {
            for b in a + 1..emb.len() {
                let dist: f64 = emb[a].iter().zip(&emb[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(dist > 1e-3, "steps {a} and {b} collide");
            }
        }
    }

    struct ZeroDrift;

    impl DriftModel for ZeroDrift {
        fn drifts(&self, cfg: &SdeConfig, points: &[f64], _: &[usize]) -> Result<Vec<f64>> {
            Ok(vec![0.0; points.len() / cfg.dim * cfg.dim])
        }
    }

    #[test]
    fn zero_drift_is_exact_for_the_brownian_marginal() {
        // Without drift the terminal law is N(0, σ²I), and the bridge is its
        // exact time reversal, so log R + log P_B - log P_F vanishes.
        let cfg = SdeConfig::new(2, 50, 1.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut points = vec![0.0; 2];
            for s in 0..cfg.steps {
                let next = forward_sample(&cfg, &[0.0, 0.0], &points[s * 2..], s, &mut rng).unwrap();
                points.extend(next);
            }
            let traj = ContinuousTrajectory::from_points(&cfg, points).unwrap();
            let (lpf, lpb) = trajectory_logprobs(&cfg, &ZeroDrift, &traj).unwrap();
            let var = cfg.sigma * cfg.sigma;
            let x = traj.terminal();
            let log_r = -(LN_2PI + var.ln()) - (x[0] * x[0] + x[1] * x[1]) / (2.0 * var);
            assert!((log_r + lpb - lpf).abs() < 1e-9);
        }
    }

    #[test]
    fn target_samplers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = EnergySpec::Gmm25.target_sampler();
        let n = 20_000;
        let mut m = [0.0; 2];
        for _ in 0..n {
            let x = s.sample(&mut rng);
            m[0] += x[0];
            m[1] += x[1];
        }
        // component means are symmetric about zero; sd of one coordinate ≈ 7.1
        assert!(m[0].abs() / (n as f64) < 0.3 && m[1].abs() / (n as f64) < 0.3);

        let mw = EnergySpec::Manywell.target_sampler();
        let x = mw.sample(&mut rng);
        assert_eq!(x.len(), 32);
        // the first coordinate of a block favours the right-hand well
        let block = DoubleWellSampler::new(100_000);
        let right = (0..n).filter(|_| block.sample_first(&mut rng) > 0.0).count() as f64 / n as f64;
        let num = |lo: f64, hi: f64| {
            let k = 20_000;
            let h = (hi - lo) / k as f64;
            (0..k).map(|i| double_well_log_density(lo + (i as f64 + 0.5) * h, 0.0).exp() * h).sum::<f64>()
        };
        let p_right = num(0.0, 4.0) / num(-4.0, 4.0);
        assert!((right - p_right).abs() < 4.0 * (p_right * (1.0 - p_right) / n as f64).sqrt());
    }
}
