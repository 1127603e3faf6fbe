//! Neural drift for the diffusion sampler.
//!
//! The network reads `[x_t, sin/cos time features]` and returns the drift
//! `u(x_t, t)` of the Gaussian forward kernel.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::continuous::{time_features, ContinuousTrajectory, DriftModel, SdeConfig, TIME_FEATURES};
use crate::error::{ensure_dim, ensure_finite, Result};
use crate::grid_policy::{StepReport, LOG_Z};
use crate::nn::{Activation, AdamConfig, AdamState, BatchInput, LearningRates, Mlp, MlpSpec, ParamBundle};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct DriftPolicy {
    cfg: SdeConfig,
    net: Mlp,
    adam: AdamState,
    grads: ParamBundle,
    lr: LearningRates,
    /// Time features of every step index, row-major.
    features: Vec<f64>,
}

impl DriftPolicy {
    pub fn new<R: Rng + ?Sized>(
        cfg: &SdeConfig,
        hidden: &[usize],
        activation: Activation,
        lr: LearningRates,
        adam: AdamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec = MlpSpec::new(cfg.dim + TIME_FEATURES, hidden.to_vec(), cfg.dim, activation)?;
        let params = ParamBundle::init(&spec, rng).with_scalar(LOG_Z, 0.0);
        let net = Mlp::from_params(spec, params)?;
        let mut features = vec![0.0; (cfg.steps + 1) * TIME_FEATURES];
        for (s, row) in features.chunks_mut(TIME_FEATURES).enumerate() {
            time_features(cfg.time(s), row);
        }
        Ok(Self {
            cfg: cfg.clone(),
            adam: AdamState::new(&net.params, adam),
            grads: net.params.zeros_like(),
            net,
            lr,
            features,
        })
    }

    pub fn config(&self) -> &SdeConfig {
        &self.cfg
    }

    pub fn log_z(&self) -> f64 {
        self.net.params.scalar(LOG_Z).unwrap_or(0.0)
    }

    pub fn params(&self) -> &ParamBundle {
        &self.net.params
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam.step_count
    }

    fn inputs(&self, points: &[f64], steps: &[usize]) -> Vec<f64> {
        let d = self.cfg.dim;
        let w = d + TIME_FEATURES;
        let mut data = Vec::with_capacity(steps.len() * w);
        for (r, &s) in steps.iter().enumerate() {
            data.extend_from_slice(&points[r * d..(r + 1) * d]);
            data.extend_from_slice(&self.features[s * TIME_FEATURES..(s + 1) * TIME_FEATURES]);
        }
        data
    }

    /// Rolls out `n` trajectories. `extra_noise` scales additional Gaussian
    /// noise `N(0, extra_noise · σ²Δt)` added to each step for exploration.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, extra_noise: f64, rng: &mut R) -> Result<Vec<ContinuousTrajectory>> {
        let d = self.cfg.dim;
        let steps = self.cfg.steps;
        let dt = self.cfg.dt();
        let sd = self.cfg.step_variance().sqrt();
        let extra_sd = (extra_noise.max(0.0) * self.cfg.step_variance()).sqrt();
        let mut paths = vec![vec![0.0; (steps + 1) * d]; n];
        let mut current = vec![0.0; n * d];
        for s in 0..steps {
            let drift = self.drifts(&self.cfg, &current, &vec![s; n])?;
            for (k, path) in paths.iter_mut().enumerate() {
                for j in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    let mut next = current[k * d + j] + drift[k * d + j] * dt + sd * z;
                    if extra_sd > 0.0 {
                        let e: f64 = rng.sample(StandardNormal);
                        next += extra_sd * e;
                    }
                    current[k * d + j] = next;
                    path[(s + 1) * d + j] = next;
                }
            }
        }
        paths
            .into_iter()
            .map(|p| ContinuousTrajectory::from_points(&self.cfg, p))
            .collect()
    }

    fn batch_rows(&self, trajs: &[ContinuousTrajectory]) -> Result<(Vec<f64>, Vec<usize>)> {
        let d = self.cfg.dim;
        let steps = self.cfg.steps;
        let mut points = Vec::with_capacity(trajs.len() * steps * d);
        let mut idx = Vec::with_capacity(trajs.len() * steps);
        for t in trajs {
            ensure_dim("trajectory length", steps + 1, t.len())?;
            ensure_dim("trajectory dim", d, t.dim())?;
            points.extend_from_slice(&t.points()[..steps * d]);
            idx.extend(0..steps);
        }
        Ok((self.inputs(&points, &idx), idx))
    }

    /// `log P_F(τ)` of each trajectory from row-major drifts.
    fn log_pf_from(&self, trajs: &[ContinuousTrajectory], drift: &[f64]) -> Vec<f64> {
        let d = self.cfg.dim;
        let steps = self.cfg.steps;
        let dt = self.cfg.dt();
        let var = self.cfg.step_variance();
        let norm = -0.5 * d as f64 * (LN_2PI + var.ln());
        trajs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut total = 0.0;
                for s in 0..steps {
                    let (x, y) = (t.point(s), t.point(s + 1));
                    let u = &drift[(k * steps + s) * d..(k * steps + s + 1) * d];
                    let mut q = 0.0;
                    for j in 0..d {
                        q += (y[j] - x[j] - u[j] * dt).powi(2);
                    }
                    total += norm - q / (2.0 * var);
                }
                total
            })
            .collect()
    }

    pub fn log_pf(&self, trajs: &[ContinuousTrajectory]) -> Result<Vec<f64>> {
        if trajs.is_empty() {
            return Ok(Vec::new());
        }
        let (data, idx) = self.batch_rows(trajs)?;
        let drift = self.net.forward_batch(BatchInput::Dense {
            data: &data,
            rows: idx.len(),
        })?;
        Ok(self.log_pf_from(trajs, &drift))
    }

    /// TB discrepancies given each trajectory's log-reward and `log P_B`.
    pub fn tb_deltas(&self, trajs: &[ContinuousTrajectory], log_rewards: &[f64], log_pbs: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("log rewards", trajs.len(), log_rewards.len())?;
        ensure_dim("log P_B", trajs.len(), log_pbs.len())?;
        let log_z = self.log_z();
        self.log_pf(trajs)?
            .iter()
            .enumerate()
            .map(|(k, lpf)| ensure_finite("TB discrepancy", (log_rewards[k] + log_pbs[k]) - (log_z + lpf)))
            .collect()
    }

    /// One Adam step on the mean squared TB discrepancy. Trajectory points are
    /// treated as constants.
    pub fn tb_step(
        &mut self,
        trajs: &[ContinuousTrajectory],
        log_rewards: &[f64],
        log_pbs: &[f64],
    ) -> Result<StepReport<Vec<f64>>> {
        ensure_dim("log rewards", trajs.len(), log_rewards.len())?;
        ensure_dim("log P_B", trajs.len(), log_pbs.len())?;
        if trajs.is_empty() {
            return Ok(StepReport {
                loss: 0.0,
                deltas: Vec::new(),
            });
        }
        let (data, idx) = self.batch_rows(trajs)?;
        let tape = self.net.forward_tape(BatchInput::Dense {
            data: &data,
            rows: idx.len(),
        })?;
        let drift = tape.output();
        let log_z = self.log_z();
        let deltas = self
            .log_pf_from(trajs, drift)
            .iter()
            .enumerate()
            .map(|(k, lpf)| ensure_finite("TB discrepancy", (log_rewards[k] + log_pbs[k]) - (log_z + lpf)))
            .collect::<Result<Vec<f64>>>()?;

        let d = self.cfg.dim;
        let steps = self.cfg.steps;
        let dt = self.cfg.dt();
        let sigma2 = self.cfg.sigma * self.cfg.sigma;
        let n = trajs.len() as f64;
        let mut upstream = vec![0.0; drift.len()];
        let mut d_log_z = 0.0;
        for (k, t) in trajs.iter().enumerate() {
            let g = -2.0 * deltas[k] / n;
            d_log_z += g;
            for s in 0..steps {
                let (x, y) = (t.point(s), t.point(s + 1));
                let base = (k * steps + s) * d;
                for j in 0..d {
                    // ∂ log P_F / ∂u = (Δx - uΔt) / σ²
                    upstream[base + j] = g * (y[j] - x[j] - drift[base + j] * dt) / sigma2;
                }
            }
        }
        self.grads.fill_zero();
        self.net.backward_tape(&tape, &upstream, &mut self.grads)?;
        *self.grads.scalar_mut(LOG_Z).expect("log_z registered") = d_log_z;
        self.adam.step(&mut self.net.params, &self.grads, self.lr)?;
        let loss = deltas.iter().map(|v| v * v).sum::<f64>() / n;
        Ok(StepReport { loss, deltas })
    }
}

impl DriftModel for DriftPolicy {
    fn drifts(&self, cfg: &SdeConfig, points: &[f64], steps: &[usize]) -> Result<Vec<f64>> {
        ensure_dim("drift dim", self.cfg.dim, cfg.dim)?;
        ensure_dim("drift rows", steps.len() * cfg.dim, points.len())?;
        if steps.is_empty() {
            return Ok(Vec::new());
        }
        let data = self.inputs(points, steps);
        self.net.forward_batch(BatchInput::Dense {
            data: &data,
            rows: steps.len(),
        })
    }
}
