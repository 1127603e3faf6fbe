//! The training loop: behavior-source selection, Student and Teacher
//! updates, replay, local search, reward-call accounting and metric rows.
//!
//! Training draws from one ChaCha8 stream seeded with `seed`; evaluation
//! uses stream 1 of the same seed so that measuring never shifts training.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Exploration, L1Method, Objective, RunConfig};
use crate::continuous::{sample_backward_trajectory, trajectory_log_pb, ContinuousTrajectory, EnergySpec, SdeConfig};
use crate::error::{Error, Result};
use crate::exploration::{BehaviorSchedule, PriorityKey, ReplayBuffer, ReplayEntry, Source, TransitionEntry};
use crate::grid::{GridEnv, GridTrajectory};
use crate::grid_policy::GridPolicy;
use crate::local_search::{grid_local_search, SearchObjective};
use crate::metrics::{bounds, l1_between, l1_distance, EvalReport, GridBounds, ModeTracker, SdeBounds};
use crate::nn::LearningRates;
use crate::sde_policy::DriftPolicy;
use crate::teacher::{quantile, teacher_log_reward_db, teacher_log_reward_tb, threshold_gate, TeacherRewardConfig};

pub const METRICS_HEADER: [&str; 10] = [
    "round",
    "reward_calls",
    "modes",
    "l1",
    "elbo",
    "elbo_is",
    "eubo",
    "student_loss",
    "teacher_loss",
    "source",
];

/// One evaluation checkpoint. `round` counts completed training rounds;
/// losses and source describe the most recent round.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub reward_calls: u64,
    pub modes: usize,
    pub l1: Option<f64>,
    pub elbo: Option<f64>,
    pub elbo_is: Option<f64>,
    pub eubo: Option<f64>,
    pub student_loss: Option<f64>,
    pub teacher_loss: Option<f64>,
    pub source: Option<Source>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundReport {
    pub source: Source,
    /// Mean squared Student discrepancy of the round's batch, before the update.
    pub student_loss: f64,
    pub teacher_loss: Option<f64>,
    /// Reward calls spent by this round.
    pub reward_calls: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub rounds: u64,
    pub reward_calls: u64,
    pub modes: usize,
    pub total_modes: usize,
    pub final_report: Option<EvalReport>,
}

pub fn train_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Per-trajectory Teacher log-rewards. `samples[k]` holds the Student
/// discrepancies of every trajectory drawn for terminal `k` (one entry for
/// trajectory balance, one per transition for detailed balance).
fn teacher_rewards(
    cfg: &TeacherRewardConfig,
    objective: Objective,
    samples: &[Vec<Vec<f64>>],
    log_rewards: &[f64],
) -> Result<Vec<f64>> {
    samples
        .iter()
        .zip(log_rewards)
        .map(|(s, &lr)| match objective {
            Objective::Tb => {
                let deltas: Vec<f64> = s.iter().map(|d| d[0]).collect();
                teacher_log_reward_tb(&deltas, lr, cfg)
            }
            Objective::Db => teacher_log_reward_db(s, cfg),
        })
        .collect()
}

fn policy_deltas(
    policy: &GridPolicy,
    objective: Objective,
    env: &GridEnv,
    trajs: &[GridTrajectory],
    log_rewards: &[f64],
) -> Result<Vec<Vec<f64>>> {
    match objective {
        Objective::Tb => Ok(policy
            .tb_deltas(env, trajs, log_rewards)?
            .into_iter()
            .map(|d| vec![d])
            .collect()),
        Objective::Db => policy.db_deltas(env, trajs, log_rewards),
    }
}

fn policy_step(
    policy: &mut GridPolicy,
    objective: Objective,
    env: &GridEnv,
    trajs: &[GridTrajectory],
    log_rewards: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    match objective {
        Objective::Tb => {
            let r = policy.tb_step(env, trajs, log_rewards)?;
            Ok((r.loss, r.deltas.into_iter().map(|d| vec![d]).collect()))
        }
        Objective::Db => {
            let r = policy.db_step(env, trajs, log_rewards)?;
            Ok((r.loss, r.deltas))
        }
    }
}

fn buffer_key(exploration: Exploration) -> PriorityKey {
    match exploration {
        Exploration::Prt => PriorityKey::Reward,
        Exploration::PerStar => PriorityKey::TdError,
        _ => PriorityKey::TeacherReward,
    }
}

enum GridBuffer {
    Off,
    Terminals(ReplayBuffer<ReplayEntry<usize>>),
    Transitions(ReplayBuffer<TransitionEntry>),
}

pub struct GridTrainer {
    cfg: RunConfig,
    env: GridEnv,
    student: GridPolicy,
    teacher: Option<GridPolicy>,
    teacher_reward: TeacherRewardConfig,
    schedule: BehaviorSchedule,
    buffer: GridBuffer,
    tracker: ModeTracker,
    target: Option<Vec<f64>>,
    rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    round: u64,
    reward_calls: u64,
    budget: u64,
    batch: usize,
    search_pending: bool,
}

impl GridTrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let env = GridEnv::new(cfg.grid_config()?.clone())?;
        let mut rng = train_rng(cfg.seed);
        let db = cfg.objective == Objective::Db;
        let (hidden, act, m) = (cfg.hidden(), cfg.activation(), &cfg.model);
        let student = GridPolicy::new(
            &env,
            &hidden,
            act,
            db,
            LearningRates {
                layers: m.lr_policy,
                scalars: m.lr_log_z,
            },
            m.adam,
            &mut rng,
        )?;
        let teacher = if cfg.exploration.uses_teacher() {
            let lr = LearningRates {
                layers: m.lr_teacher,
                scalars: m.lr_teacher_log_z,
            };
            Some(GridPolicy::new(&env, &hidden, act, db, lr, m.adam, &mut rng)?)
        } else {
            None
        };
        let buffer = if cfg.uses_buffer() {
            let cap = cfg.buffer_capacity()?;
            let shift = cfg.buffer.rank_shift;
            match buffer_key(cfg.exploration) {
                PriorityKey::TdError => GridBuffer::Transitions(ReplayBuffer::new(cap, PriorityKey::TdError)?.with_rank_shift(shift)),
                key => GridBuffer::Terminals(ReplayBuffer::new(cap, key)?.with_rank_shift(shift)),
            }
        } else {
            GridBuffer::Off
        };
        let cap = cfg.eval.enumeration_cap;
        let tracker = if env.config().state_count() <= u128::from(cap) {
            ModeTracker::for_grid(&env, cap)?
        } else {
            ModeTracker::new(0)
        };
        Ok(Self {
            teacher_reward: cfg.teacher_reward(),
            schedule: cfg.schedule(),
            budget: cfg.budget(),
            batch: cfg.batch_size(),
            cfg: cfg.clone(),
            env,
            student,
            teacher,
            buffer,
            tracker,
            target: None,
            rng,
            eval_rng: eval_rng(cfg.seed),
            round: 0,
            reward_calls: 0,
            search_pending: false,
        })
    }

    pub fn env(&self) -> &GridEnv {
        &self.env
    }

    pub fn student(&self) -> &GridPolicy {
        &self.student
    }

    pub fn teacher(&self) -> Option<&GridPolicy> {
        self.teacher.as_ref()
    }

    pub fn tracker(&self) -> &ModeTracker {
        &self.tracker
    }

    pub fn rounds(&self) -> u64 {
        self.round
    }

    pub fn reward_calls(&self) -> u64 {
        self.reward_calls
    }

    pub fn buffer_len(&self) -> usize {
        match &self.buffer {
            GridBuffer::Off => 0,
            GridBuffer::Terminals(b) => b.len(),
            GridBuffer::Transitions(b) => b.len(),
        }
    }

    fn next_source(&self) -> Source {
        if self.teacher.is_none() {
            return Source::Student;
        }
        let ready = matches!(&self.buffer, GridBuffer::Terminals(b) if !b.is_empty());
        self.schedule.select_source(self.round, ready)
    }

    /// Runs one training round; `None` once the next fresh batch would
    /// exceed the reward-call budget.
    pub fn round(&mut self) -> Result<Option<RoundReport>> {
        let source = self.next_source();
        let fresh = source != Source::Buffer;
        let b = self.batch;
        if fresh && self.reward_calls + b as u64 > self.budget {
            return Ok(None);
        }
        let calls_before = self.reward_calls;
        let local_search = self.cfg.exploration == Exploration::TeacherLocalSearch;
        if local_search && self.cfg.local_search.is_due(self.round) {
            self.search_pending = true;
        }

        let (mut trajs, mut log_rewards) = match source {
            Source::Student => {
                let eps = if self.cfg.exploration == Exploration::Epsilon {
                    self.cfg.epsilon
                } else {
                    0.0
                };
                let t = self.env.sample_trajectories(&self.student, b, eps, &mut self.rng)?;
                let lr = self.evaluate_rewards(&t);
                (t, lr)
            }
            Source::Teacher => {
                let teacher = self.teacher.as_ref().expect("teacher source implies a teacher");
                let t = self.env.sample_trajectories(teacher, b, 0.0, &mut self.rng)?;
                let lr = self.evaluate_rewards(&t);
                (t, lr)
            }
            Source::Buffer => {
                let GridBuffer::Terminals(buf) = &self.buffer else {
                    return Err(Error::InvalidState("buffer round without a terminal buffer".into()));
                };
                let picked: Vec<(usize, f64)> = buf
                    .sample(b, &mut self.rng)?
                    .into_iter()
                    .map(|e| (e.payload, e.log_reward))
                    .collect();
                let mut t = Vec::with_capacity(b);
                for &(x, _) in &picked {
                    t.push(self.env.sample_backward(x, &mut self.rng)?);
                }
                (t, picked.into_iter().map(|(_, lr)| lr).collect())
            }
        };

        if source == Source::Teacher
            && self.search_pending
            && self.reward_calls + (self.cfg.local_search.iterations * b) as u64 <= self.budget
        {
            self.search_pending = false;
            (trajs, log_rewards) = self.refine(trajs, &log_rewards)?;
        }

        let objective = self.cfg.objective;
        let priority_needs_teacher_reward = fresh
            && matches!(&self.buffer, GridBuffer::Terminals(buf) if buf.key() == PriorityKey::TeacherReward);
        let need_teacher_reward = self.teacher.is_some() || priority_needs_teacher_reward;
        let n_mc = self.teacher_reward.n_mc;
        let mut samples: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n_mc); trajs.len()];
        if need_teacher_reward && n_mc > 1 {
            let mut extra = Vec::with_capacity(trajs.len() * (n_mc - 1));
            let mut extra_lr = Vec::with_capacity(extra.capacity());
            for (t, &lr) in trajs.iter().zip(&log_rewards) {
                for _ in 1..n_mc {
                    extra.push(self.env.sample_backward(t.terminal(), &mut self.rng)?);
                    extra_lr.push(lr);
                }
            }
            let deltas = policy_deltas(&self.student, objective, &self.env, &extra, &extra_lr)?;
            for (k, d) in deltas.into_iter().enumerate() {
                samples[k / (n_mc - 1)].push(d);
            }
        }

        let (student_loss, deltas) = policy_step(&mut self.student, objective, &self.env, &trajs, &log_rewards)?;

        let teacher_log_rewards = if need_teacher_reward {
            for (s, d) in samples.iter_mut().zip(&deltas) {
                s.insert(0, d.clone());
            }
            Some(teacher_rewards(&self.teacher_reward, objective, &samples, &log_rewards)?)
        } else {
            None
        };

        let teacher_loss = match (&mut self.teacher, &teacher_log_rewards) {
            (Some(teacher), Some(tr)) => Some(policy_step(teacher, objective, &self.env, &trajs, tr)?.0),
            _ => None,
        };

        if fresh {
            self.store(&trajs, &log_rewards, teacher_log_rewards.as_deref(), &deltas);
            if self.cfg.exploration.replays_every_round() {
                let n_transitions = deltas.iter().map(Vec::len).sum();
                self.replay(n_transitions)?;
            }
        }

        self.round += 1;
        Ok(Some(RoundReport {
            source,
            student_loss,
            teacher_loss,
            reward_calls: self.reward_calls - calls_before,
        }))
    }

    /// Task log-rewards of freshly sampled terminals; each one is a reward call.
    fn evaluate_rewards(&mut self, trajs: &[GridTrajectory]) -> Vec<f64> {
        self.reward_calls += trajs.len() as u64;
        self.tracker.count_modes(&self.env, trajs.iter().map(GridTrajectory::terminal));
        trajs.iter().map(|t| self.env.log_reward_of(t.terminal())).collect()
    }

    /// Teacher-side local search on a Teacher batch. Refined terminals come
    /// back with fresh backward trajectories.
    fn refine(&mut self, trajs: Vec<GridTrajectory>, log_rewards: &[f64]) -> Result<(Vec<GridTrajectory>, Vec<f64>)> {
        let Self {
            env,
            student,
            teacher,
            teacher_reward,
            tracker,
            rng,
            reward_calls,
            cfg,
            ..
        } = self;
        let teacher = teacher.as_ref().expect("local search runs on Teacher batches");
        let objective = cfg.objective;
        let search_objective = cfg.local_search.objective;
        let score = |trajs: &[GridTrajectory], lr: &[f64]| -> Result<Vec<f64>> {
            match search_objective {
                SearchObjective::TaskReward => Ok(lr.to_vec()),
                SearchObjective::TeacherReward => {
                    let d = policy_deltas(student, objective, env, trajs, lr)?;
                    let samples: Vec<Vec<Vec<f64>>> = d.into_iter().map(|x| vec![x]).collect();
                    teacher_rewards(teacher_reward, objective, &samples, lr)
                }
            }
        };
        let initial = score(&trajs, log_rewards)?;
        let result = grid_local_search(
            env,
            teacher,
            trajs,
            initial,
            &cfg.local_search,
            |cands| {
                *reward_calls += cands.len() as u64;
                tracker.count_modes(env, cands.iter().map(GridTrajectory::terminal));
                let lr: Vec<f64> = cands.iter().map(|t| env.log_reward_of(t.terminal())).collect();
                score(cands, &lr)
            },
            rng,
        )?;
        let mut out = Vec::with_capacity(result.trajectories.len());
        let mut lr = Vec::with_capacity(out.capacity());
        for t in &result.trajectories {
            out.push(env.sample_backward(t.terminal(), rng)?);
            lr.push(env.log_reward_of(t.terminal()));
        }
        Ok((out, lr))
    }

    fn store(&mut self, trajs: &[GridTrajectory], log_rewards: &[f64], teacher: Option<&[f64]>, deltas: &[Vec<f64>]) {
        match &mut self.buffer {
            GridBuffer::Off => {}
            GridBuffer::Terminals(buf) => buf.insert(trajs.iter().zip(log_rewards).enumerate().map(|(k, (t, &lr))| {
                ReplayEntry {
                    payload: t.terminal(),
                    log_reward: lr,
                    teacher_log_reward: teacher.map_or(f64::NAN, |tr| tr[k]),
                }
            })),
            GridBuffer::Transitions(buf) => {
                let mut items = Vec::new();
                for ((t, &lr), d) in trajs.iter().zip(log_rewards).zip(deltas) {
                    let (states, actions) = (t.states(), t.actions());
                    for (r, (&s, &a)) in states.iter().zip(actions).enumerate() {
                        let last = r + 1 == states.len();
                        items.push(TransitionEntry {
                            state: s,
                            action: a,
                            next_state: (!last).then(|| states[r + 1]),
                            terminal_log_reward: last.then_some(lr),
                            td_error: d[r],
                        });
                    }
                }
                buf.insert(items);
            }
        }
    }

    /// The extra replay update of PRT / PER / PER*: a Student step on a
    /// prioritized buffer batch, costing no reward calls.
    fn replay(&mut self, n_transitions: usize) -> Result<()> {
        match &self.buffer {
            GridBuffer::Off => Ok(()),
            GridBuffer::Terminals(buf) => {
                let picked: Vec<(usize, f64)> = buf
                    .sample(self.batch, &mut self.rng)?
                    .into_iter()
                    .map(|e| (e.payload, e.log_reward))
                    .collect();
                let mut trajs = Vec::with_capacity(picked.len());
                for &(x, _) in &picked {
                    trajs.push(self.env.sample_backward(x, &mut self.rng)?);
                }
                let lr: Vec<f64> = picked.iter().map(|p| p.1).collect();
                policy_step(&mut self.student, self.cfg.objective, &self.env, &trajs, &lr)?;
                Ok(())
            }
            GridBuffer::Transitions(buf) => {
                let picked = buf.sample(n_transitions, &mut self.rng)?;
                self.student.transition_step(&self.env, &picked)?;
                Ok(())
            }
        }
    }

    pub fn evaluate(&mut self) -> Result<EvalReport> {
        let ev = &self.cfg.eval;
        let cap = ev.enumeration_cap;
        let enumerable = self.env.config().state_count() <= u128::from(cap);
        let mut report = EvalReport {
            n_modes: self.tracker.count(),
            ..EvalReport::default()
        };
        if enumerable && ev.l1_samples > 0 {
            report.l1 = Some(match ev.l1_method {
                L1Method::Sampled => {
                    report.l1_samples = ev.l1_samples;
                    l1_distance(&self.env, &self.student, ev.l1_samples, cap, &mut self.eval_rng)?
                }
                L1Method::Exact => {
                    if self.target.is_none() {
                        self.target = Some(self.env.exact_target(cap)?);
                    }
                    let p = self.student.terminating_distribution(&self.env, cap)?;
                    l1_between(&p, self.target.as_ref().expect("target cached"))?
                }
            });
        }
        let m = self.cfg.bound_samples();
        if enumerable && m > 0 {
            let src = GridBounds::new(&self.env, &self.student, cap)?;
            let (elbo, elbo_is, eubo) = bounds(&src, m, &mut self.eval_rng)?;
            report.elbo = Some(elbo);
            report.elbo_is = Some(elbo_is);
            report.eubo = Some(eubo);
            report.bound_samples = m;
        }
        Ok(report)
    }
}

pub struct SdeTrainer {
    cfg: RunConfig,
    energy: EnergySpec,
    sde: SdeConfig,
    student: DriftPolicy,
    teacher: Option<DriftPolicy>,
    teacher_reward: TeacherRewardConfig,
    schedule: BehaviorSchedule,
    buffer: Option<ReplayBuffer<ReplayEntry<Vec<f64>>>>,
    threshold: Option<f64>,
    rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    round: u64,
    reward_calls: u64,
    budget: u64,
    batch: usize,
}

impl SdeTrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let energy = cfg
            .task
            .energy()
            .ok_or_else(|| Error::InvalidConfig("not a diffusion task".into()))?;
        let sigma = cfg.sde.sigma.unwrap_or(SdeConfig::for_energy(energy).sigma);
        let sde = SdeConfig::new(energy.dim(), cfg.sde.steps, sigma)?;
        let mut rng = train_rng(cfg.seed);
        let (hidden, act, m) = (cfg.hidden(), cfg.activation(), &cfg.model);
        let student = DriftPolicy::new(
            &sde,
            &hidden,
            act,
            LearningRates {
                layers: m.lr_policy,
                scalars: m.lr_log_z,
            },
            m.adam,
            &mut rng,
        )?;
        let teacher = if cfg.exploration.uses_teacher() {
            let lr = LearningRates {
                layers: m.lr_teacher,
                scalars: m.lr_teacher_log_z,
            };
            Some(DriftPolicy::new(&sde, &hidden, act, lr, m.adam, &mut rng)?)
        } else {
            None
        };
        let buffer = if cfg.uses_buffer() {
            Some(ReplayBuffer::new(cfg.buffer_capacity()?, buffer_key(cfg.exploration))?.with_rank_shift(cfg.buffer.rank_shift))
        } else {
            None
        };
        let teacher_reward = cfg.teacher_reward();
        let budget = cfg.budget();
        let mut reward_calls = 0;
        let mut threshold = None;
        if let (Some(_), Some(q)) = (&teacher, teacher_reward.threshold_quantile) {
            let n = (teacher_reward.threshold_samples as u64).min(budget) as usize;
            if n > 0 {
                let samples = student.sample(n, 0.0, &mut rng)?;
                let lr = samples
                    .iter()
                    .map(|t| energy.log_reward(t.terminal()))
                    .collect::<Result<Vec<f64>>>()?;
                reward_calls += n as u64;
                threshold = Some(quantile(&lr, q)?);
            }
        }
        Ok(Self {
            schedule: cfg.schedule(),
            batch: cfg.batch_size(),
            cfg: cfg.clone(),
            energy,
            sde,
            student,
            teacher,
            teacher_reward,
            buffer,
            threshold,
            rng,
            eval_rng: eval_rng(cfg.seed),
            round: 0,
            reward_calls,
            budget,
        })
    }

    pub fn student(&self) -> &DriftPolicy {
        &self.student
    }

    pub fn teacher(&self) -> Option<&DriftPolicy> {
        self.teacher.as_ref()
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn rounds(&self) -> u64 {
        self.round
    }

    pub fn reward_calls(&self) -> u64 {
        self.reward_calls
    }

    fn next_source(&self) -> Source {
        if self.teacher.is_none() {
            return Source::Student;
        }
        let ready = self.buffer.as_ref().is_some_and(|b| !b.is_empty());
        self.schedule.select_source(self.round, ready)
    }

    fn log_rewards(&self, trajs: &[ContinuousTrajectory]) -> Result<Vec<f64>> {
        trajs.iter().map(|t| self.energy.log_reward(t.terminal())).collect()
    }

    fn log_pbs(&self, trajs: &[ContinuousTrajectory]) -> Result<Vec<f64>> {
        trajs.iter().map(|t| trajectory_log_pb(&self.sde, t)).collect()
    }

    fn replay_batch(&mut self) -> Result<(Vec<ContinuousTrajectory>, Vec<f64>)> {
        let buf = self.buffer.as_ref().ok_or(Error::EmptyBuffer)?;
        let picked: Vec<(Vec<f64>, f64)> = buf
            .sample(self.batch, &mut self.rng)?
            .into_iter()
            .map(|e| (e.payload.clone(), e.log_reward))
            .collect();
        let mut trajs = Vec::with_capacity(picked.len());
        for (x, _) in &picked {
            trajs.push(sample_backward_trajectory(&self.sde, x, &mut self.rng)?);
        }
        Ok((trajs, picked.into_iter().map(|p| p.1).collect()))
    }

    pub fn round(&mut self) -> Result<Option<RoundReport>> {
        if self.round >= self.cfg.sde.max_rounds {
            return Ok(None);
        }
        let source = self.next_source();
        let fresh = source != Source::Buffer;
        let b = self.batch;
        if fresh && self.reward_calls + b as u64 > self.budget {
            return Ok(None);
        }
        let calls_before = self.reward_calls;
        let (trajs, log_rewards) = match source {
            Source::Student => {
                let extra = if self.cfg.exploration == Exploration::Epsilon {
                    self.cfg.epsilon
                } else {
                    0.0
                };
                let t = self.student.sample(b, extra, &mut self.rng)?;
                let lr = self.log_rewards(&t)?;
                (t, lr)
            }
            Source::Teacher => {
                let teacher = self.teacher.as_ref().expect("teacher source implies a teacher");
                let t = teacher.sample(b, 0.0, &mut self.rng)?;
                let lr = self.log_rewards(&t)?;
                (t, lr)
            }
            Source::Buffer => self.replay_batch()?,
        };
        if fresh {
            self.reward_calls += b as u64;
        }
        let log_pbs = self.log_pbs(&trajs)?;

        let need_teacher_reward = self.teacher.is_some()
            || (fresh && self.buffer.as_ref().is_some_and(|buf| buf.key() == PriorityKey::TeacherReward));
        let n_mc = self.teacher_reward.n_mc;
        let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_mc); trajs.len()];
        if need_teacher_reward && n_mc > 1 {
            let mut extra = Vec::with_capacity(trajs.len() * (n_mc - 1));
            let mut extra_lr = Vec::with_capacity(extra.capacity());
            for (t, &lr) in trajs.iter().zip(&log_rewards) {
                for _ in 1..n_mc {
                    extra.push(sample_backward_trajectory(&self.sde, t.terminal(), &mut self.rng)?);
                    extra_lr.push(lr);
                }
            }
            let extra_pb = self.log_pbs(&extra)?;
            for (k, d) in self.student.tb_deltas(&extra, &extra_lr, &extra_pb)?.into_iter().enumerate() {
                samples[k / (n_mc - 1)].push(d);
            }
        }

        let report = self.student.tb_step(&trajs, &log_rewards, &log_pbs)?;

        let teacher_log_rewards = if need_teacher_reward {
            let mut out = Vec::with_capacity(trajs.len());
            for (k, s) in samples.iter_mut().enumerate() {
                s.insert(0, report.deltas[k]);
                out.push(teacher_log_reward_tb(s, log_rewards[k], &self.teacher_reward)?);
            }
            Some(out)
        } else {
            None
        };

        let mut teacher_loss = None;
        if let (Some(teacher), Some(tr)) = (&mut self.teacher, &teacher_log_rewards) {
            let keep: Vec<usize> = (0..trajs.len())
                .filter(|&k| threshold_gate(log_rewards[k], self.threshold))
                .collect();
            let sub_t: Vec<ContinuousTrajectory> = keep.iter().map(|&k| trajs[k].clone()).collect();
            let sub_r: Vec<f64> = keep.iter().map(|&k| tr[k]).collect();
            let sub_pb: Vec<f64> = keep.iter().map(|&k| log_pbs[k]).collect();
            teacher_loss = Some(teacher.tb_step(&sub_t, &sub_r, &sub_pb)?.loss);
        }

        if fresh {
            if let Some(buf) = &mut self.buffer {
                buf.insert(trajs.iter().zip(&log_rewards).enumerate().map(|(k, (t, &lr))| ReplayEntry {
                    payload: t.terminal().to_vec(),
                    log_reward: lr,
                    teacher_log_reward: teacher_log_rewards.as_ref().map_or(f64::NAN, |tr| tr[k]),
                }));
            }
            if self.cfg.exploration.replays_every_round() {
                let (rt, rl) = self.replay_batch()?;
                let rpb = self.log_pbs(&rt)?;
                self.student.tb_step(&rt, &rl, &rpb)?;
            }
        }

        self.round += 1;
        Ok(Some(RoundReport {
            source,
            student_loss: report.loss,
            teacher_loss,
            reward_calls: self.reward_calls - calls_before,
        }))
    }

    pub fn evaluate(&mut self) -> Result<EvalReport> {
        let mut report = EvalReport::default();
        let m = self.cfg.bound_samples();
        if m > 0 {
            let src = SdeBounds::new(&self.student, self.energy);
            let (elbo, elbo_is, eubo) = bounds(&src, m, &mut self.eval_rng)?;
            report.elbo = Some(elbo);
            report.elbo_is = Some(elbo_is);
            report.eubo = Some(eubo);
            report.bound_samples = m;
        }
        Ok(report)
    }
}

pub enum Trainer {
    Grid(Box<GridTrainer>),
    Sde(Box<SdeTrainer>),
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(if cfg.is_grid() {
            Trainer::Grid(Box::new(GridTrainer::new(cfg)?))
        } else {
            Trainer::Sde(Box::new(SdeTrainer::new(cfg)?))
        })
    }

    pub fn round(&mut self) -> Result<Option<RoundReport>> {
        match self {
            Trainer::Grid(t) => t.round(),
            Trainer::Sde(t) => t.round(),
        }
    }

    pub fn evaluate(&mut self) -> Result<EvalReport> {
        match self {
            Trainer::Grid(t) => t.evaluate(),
            Trainer::Sde(t) => t.evaluate(),
        }
    }

    pub fn rounds(&self) -> u64 {
        match self {
            Trainer::Grid(t) => t.rounds(),
            Trainer::Sde(t) => t.rounds(),
        }
    }

    pub fn reward_calls(&self) -> u64 {
        match self {
            Trainer::Grid(t) => t.reward_calls(),
            Trainer::Sde(t) => t.reward_calls(),
        }
    }

    pub fn modes(&self) -> (usize, usize) {
        match self {
            Trainer::Grid(t) => (t.tracker().count(), t.tracker().total()),
            Trainer::Sde(_) => (0, 0),
        }
    }
}

fn row(trainer: &Trainer, report: &EvalReport, last: Option<&RoundReport>) -> MetricsRow {
    MetricsRow {
        round: trainer.rounds(),
        reward_calls: trainer.reward_calls(),
        modes: trainer.modes().0,
        l1: report.l1,
        elbo: report.elbo,
        elbo_is: report.elbo_is,
        eubo: report.eubo,
        student_loss: last.map(|r| r.student_loss),
        teacher_loss: last.and_then(|r| r.teacher_loss),
        source: last.map(|r| r.source),
    }
}

fn diagnostic_row(trainer: &Trainer) -> MetricsRow {
    MetricsRow {
        round: trainer.rounds(),
        reward_calls: trainer.reward_calls(),
        modes: trainer.modes().0,
        l1: None,
        elbo: None,
        elbo_is: None,
        eubo: None,
        student_loss: Some(f64::NAN),
        teacher_loss: Some(f64::NAN),
        source: None,
    }
}

/// Runs a whole training job, appending one row per evaluation checkpoint
/// to `rows`. On a numerical failure a diagnostic row (NaN losses) is
/// appended before the error is returned.
pub fn run_into(cfg: &RunConfig, rows: &mut Vec<MetricsRow>) -> Result<RunSummary> {
    cfg.validate()?;
    let budget = cfg.budget();
    if budget == 0 {
        return Ok(RunSummary {
            rounds: 0,
            reward_calls: 0,
            modes: 0,
            total_modes: 0,
            final_report: None,
        });
    }
    let mut trainer = Trainer::new(cfg)?;
    let interval = ((cfg.eval.every_fraction * budget as f64).ceil() as u64).max(1);
    let mut next_eval = interval;
    let mut last: Option<RoundReport> = None;

    let guard = |trainer: &Trainer, rows: &mut Vec<MetricsRow>, e: Error| -> Error {
        rows.push(diagnostic_row(trainer));
        e
    };

    let mut report = trainer.evaluate().map_err(|e| guard(&trainer, rows, e))?;
    rows.push(row(&trainer, &report, None));
    let mut evaluated_at = trainer.rounds();
    loop {
        match trainer.round() {
            Ok(Some(r)) => last = Some(r),
            Ok(None) => break,
            Err(e) => return Err(guard(&trainer, rows, e)),
        }
        if trainer.reward_calls() >= next_eval {
            while next_eval <= trainer.reward_calls() {
                next_eval += interval;
            }
            report = trainer.evaluate().map_err(|e| guard(&trainer, rows, e))?;
            rows.push(row(&trainer, &report, last.as_ref()));
            evaluated_at = trainer.rounds();
        }
    }
    if evaluated_at != trainer.rounds() {
        report = trainer.evaluate().map_err(|e| guard(&trainer, rows, e))?;
        rows.push(row(&trainer, &report, last.as_ref()));
    }
    let (modes, total_modes) = trainer.modes();
    Ok(RunSummary {
        rounds: trainer.rounds(),
        reward_calls: trainer.reward_calls(),
        modes,
        total_modes,
        final_report: Some(report),
    })
}

pub fn run(cfg: &RunConfig) -> Result<(Vec<MetricsRow>, RunSummary)> {
    let mut rows = Vec::new();
    let summary = run_into(cfg, &mut rows)?;
    Ok((rows, summary))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.reward_calls.to_string(),
            r.modes.to_string(),
            opt(r.l1),
            opt(r.elbo),
            opt(r.elbo_is),
            opt(r.eubo),
            opt(r.student_loss),
            opt(r.teacher_loss),
            r.source.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    write_metrics_csv(rows, std::fs::File::create(path)?)
}
