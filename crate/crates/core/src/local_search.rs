//! Backtrack-and-reconstruct local search over terminal objects.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::grid::{GridEnv, GridForwardPolicy, GridTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptRule {
    /// Accept iff the proposal strictly improves the objective.
    Deterministic,
    /// Accept with probability `min(1, exp(new - old))`.
    MetropolisHastings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchObjective {
    TaskReward,
    TeacherReward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSearchConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_every")]
    pub every_n_batches: u64,
    #[serde(default = "default_ratio")]
    pub backtrack_ratio: f64,
    #[serde(default = "default_rule")]
    pub accept_rule: AcceptRule,
    #[serde(default = "default_objective")]
    pub objective: SearchObjective,
}

fn default_iterations() -> usize {
    4
}
fn default_every() -> u64 {
    16
}
fn default_ratio() -> f64 {
    0.5
}
fn default_rule() -> AcceptRule {
    AcceptRule::Deterministic
}
fn default_objective() -> SearchObjective {
    SearchObjective::TeacherReward
}

impl Default for LocalSearchConfig {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            every_n_batches: default_every(),
            backtrack_ratio: default_ratio(),
            accept_rule: default_rule(),
            objective: default_objective(),
        }
    }
}

impl LocalSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.every_n_batches == 0 || !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return Err(Error::InvalidConfig(
                "local search needs iterations >= 1, every_n_batches >= 1, 0 < backtrack_ratio < 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether the search runs after the `round`-th batch (0-based).
    pub fn is_due(&self, round: u64) -> bool {
        (round + 1) % self.every_n_batches == 0
    }

    /// Number of moves to undo on a trajectory of `len` moves.
    pub fn backtrack_steps(&self, len: usize) -> usize {
        (self.backtrack_ratio * len as f64).ceil() as usize
    }
}

/// Decides whether `proposed` replaces `current` (both log-objectives).
pub fn accept<R: Rng + ?Sized>(rule: AcceptRule, current: f64, proposed: f64, rng: &mut R) -> bool {
    match rule {
        AcceptRule::Deterministic => proposed > current,
        AcceptRule::MetropolisHastings => {
            let log_ratio = proposed - current;
            if log_ratio >= 0.0 {
                true
            } else {
                rng.random::<f64>() < log_ratio.exp()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome<X> {
    pub x: X,
    pub score: f64,
    pub accepted: usize,
    /// Objective evaluations spent on proposals.
    pub evaluations: usize,
}

/// Runs `cfg.iterations` rounds of propose-then-accept from `x`.
///
/// `propose` performs the backtrack and reconstruction; `objective` returns a
/// log-objective. A rejected round keeps the incumbent.
pub fn local_search<X, R, P, O>(x: X, cfg: &LocalSearchConfig, mut propose: P, mut objective: O, rng: &mut R) -> Result<SearchOutcome<X>>
where
    R: Rng + ?Sized,
    P: FnMut(&X, &mut R) -> Result<X>,
    O: FnMut(&X) -> Result<f64>,
{
    let mut score = objective(&x)?;
    let mut out = SearchOutcome {
        x,
        score,
        accepted: 0,
        evaluations: 0,
    };
    for _ in 0..cfg.iterations {
        let candidate = propose(&out.x, rng)?;
        let cand_score = objective(&candidate)?;
        out.evaluations += 1;
        if accept(cfg.accept_rule, score, cand_score, rng) {
            out.x = candidate;
            score = cand_score;
            out.accepted += 1;
        }
    }
    out.score = score;
    Ok(out)
}

/// Outcome of searching a whole batch of grid trajectories.
#[derive(Debug, Clone)]
pub struct GridSearchBatch {
    pub trajectories: Vec<GridTrajectory>,
    pub scores: Vec<f64>,
    /// Every proposed trajectory in proposal order.
    pub proposals: Vec<GridTrajectory>,
    pub accepted: usize,
}

/// Backtracks part of `traj` under uniform `P_B` and rebuilds the rest with
/// `policy`: a full backward path from the terminal is drawn, its last
/// `ceil(ratio · moves)` moves are dropped, and the prefix is extended.
pub fn grid_proposals<P, R>(
    env: &GridEnv,
    policy: &P,
    trajs: &[GridTrajectory],
    cfg: &LocalSearchConfig,
    rng: &mut R,
) -> Result<Vec<GridTrajectory>>
where
    P: GridForwardPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let mut prefixes = Vec::with_capacity(trajs.len());
    for t in trajs {
        let back = env.sample_backward(t.terminal(), rng)?;
        let moves = back.increments();
        let keep = moves - cfg.backtrack_steps(moves).min(moves);
        prefixes.push(back.states()[..=keep].to_vec());
    }
    env.continue_trajectories(policy, prefixes, 0.0, rng)
}

/// Batched grid local search: every incumbent gets `cfg.iterations`
/// proposal rounds, each round proposing for the whole batch at once.
pub fn grid_local_search<P, R, O>(
    env: &GridEnv,
    policy: &P,
    incumbents: Vec<GridTrajectory>,
    scores: Vec<f64>,
    cfg: &LocalSearchConfig,
    mut objective: O,
    rng: &mut R,
) -> Result<GridSearchBatch>
where
    P: GridForwardPolicy + ?Sized,
    R: Rng + ?Sized,
    O: FnMut(&[GridTrajectory]) -> Result<Vec<f64>>,
{
    ensure_dim("incumbent scores", incumbents.len(), scores.len())?;
    let mut out = GridSearchBatch {
        trajectories: incumbents,
        scores,
        proposals: Vec::new(),
        accepted: 0,
    };
    for _ in 0..cfg.iterations {
        let cands = grid_proposals(env, policy, &out.trajectories, cfg, rng)?;
        let cand_scores = objective(&cands)?;
        ensure_dim("proposal scores", cands.len(), cand_scores.len())?;
        for (k, (cand, &s)) in cands.iter().zip(&cand_scores).enumerate() {
            if accept(cfg.accept_rule, out.scores[k], s, rng) {
                out.trajectories[k] = cand.clone();
                out.scores[k] = s;
                out.accepted += 1;
            }
        }
        out.proposals.extend(cands);
    }
    Ok(out)
}
