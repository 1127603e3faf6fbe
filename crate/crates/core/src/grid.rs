//! The deceptive hypergrid.
//!
//! States are integer coordinate vectors in `[0, H-1]^d`, starting at the
//! origin. Every state may increment one coordinate (if it is below `H-1`) or
//! terminate; terminating moves to a sink copy of the state whose reward is
//! the deceptive hypergrid reward. Internally a state is addressed by its
//! flat index `Σ coords[i] · H^i`, which makes incrementing axis `i` add
//! `H^i`, so flat indices increase along every trajectory.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::exploration::choose_action;

/// Default refusal threshold for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub side: usize,
    #[serde(default = "default_r0")]
    pub r0: f64,
    #[serde(default = "default_r1")]
    pub r1: f64,
    #[serde(default = "default_r2")]
    pub r2: f64,
}

fn default_r0() -> f64 {
    1e-5
}
fn default_r1() -> f64 {
    0.1
}
fn default_r2() -> f64 {
    2.0
}

impl GridConfig {
    pub fn new(dim: usize, side: usize) -> Self {
        Self {
            dim,
            side,
            r0: default_r0(),
            r1: default_r1(),
            r2: default_r2(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("grid dim must be >= 1".into()));
        }
        if self.side < 2 {
            return Err(Error::InvalidConfig("grid side must be >= 2".into()));
        }
        if !(self.r0 > 0.0 && self.r1 > 0.0 && self.r2 > 0.0) {
            return Err(Error::InvalidConfig("grid rewards must be positive".into()));
        }
        if !(self.r0 < self.r1 && self.r1 < self.r2) {
            return Err(Error::InvalidConfig("grid rewards must satisfy r0 < r1 < r2".into()));
        }
        Ok(())
    }

    /// `H^d`, the number of terminal states.
    pub fn state_count(&self) -> u128 {
        (self.side as u128).pow(self.dim as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridAction {
    Increment(usize),
    Terminate,
}

impl GridAction {
    /// Index into a policy's action logits: axes first, terminate last.
    pub fn index(self, dim: usize) -> usize {
        match self {
            GridAction::Increment(axis) => axis,
            GridAction::Terminate => dim,
        }
    }

    pub fn from_index(index: usize, dim: usize) -> Self {
        if index == dim {
            GridAction::Terminate
        } else {
            GridAction::Increment(index)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridState {
    pub coords: Vec<usize>,
    pub terminated: bool,
}

impl GridState {
    pub fn origin(dim: usize) -> Self {
        Self {
            coords: vec![0; dim],
            terminated: false,
        }
    }
}

/// A complete trajectory: visited grid states `s_0 = origin, …, s_k = x`
/// and the action taken at each, the last one being `Terminate`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridTrajectory {
    states: Vec<usize>,
    actions: Vec<usize>,
}

impl GridTrajectory {
    /// Flat state ids `s_0 … s_k` (the terminal sink is implicit).
    pub fn states(&self) -> &[usize] {
        &self.states
    }

    /// Action index at each state in `states()`.
    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    /// Flat id of the terminal object `x`.
    pub fn terminal(&self) -> usize {
        *self.states.last().expect("trajectories are non-empty")
    }

    /// Number of increment moves.
    pub fn increments(&self) -> usize {
        self.states.len() - 1
    }
}

/// Deceptive hypergrid with precomputed per-axis band indicators.
#[derive(Debug, Clone)]
pub struct GridEnv {
    cfg: GridConfig,
    strides: Vec<usize>,
    centre_band: Vec<bool>,
    mode_band: Vec<bool>,
    n_states: usize,
}

impl GridEnv {
    pub fn new(cfg: GridConfig) -> Result<Self> {
        cfg.validate()?;
        let count = cfg.state_count();
        if count > usize::MAX as u128 / 2 {
            return Err(Error::InvalidConfig(format!("grid with {count} states is not addressable")));
        }
        let mut strides = Vec::with_capacity(cfg.dim);
        let mut s = 1usize;
        for _ in 0..cfg.dim {
            strides.push(s);
            s *= cfg.side;
        }
        let denom = (cfg.side - 1) as f64;
        let centre_band = (0..cfg.side)
            .map(|c| (c as f64 / denom - 0.5).abs() < 0.1)
            .collect();
        let mode_band = (0..cfg.side)
            .map(|c| {
                let dist = (c as f64 / denom - 0.5).abs();
                dist > 0.3 && dist < 0.4
            })
            .collect();
        Ok(Self {
            n_states: count as usize,
            cfg,
            strides,
            centre_band,
            mode_band,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn side(&self) -> usize {
        self.cfg.side
    }

    /// Number of policy actions: one increment per axis plus terminate.
    pub fn n_actions(&self) -> usize {
        self.cfg.dim + 1
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Length of the one-hot state encoding.
    pub fn encoding_dim(&self) -> usize {
        self.cfg.dim * self.cfg.side
    }

    #[inline]
    pub fn coord(&self, id: usize, axis: usize) -> usize {
        (id / self.strides[axis]) % self.cfg.side
    }

    pub fn coords_of(&self, id: usize) -> Vec<usize> {
        (0..self.cfg.dim).map(|a| self.coord(id, a)).collect()
    }

    pub fn id_of(&self, coords: &[usize]) -> Result<usize> {
        ensure_dim("grid coords", self.cfg.dim, coords.len())?;
        let mut id = 0;
        for (axis, &c) in coords.iter().enumerate() {
            if c >= self.cfg.side {
                return Err(Error::InvalidState(format!("coordinate {c} out of bounds on axis {axis}")));
            }
            id += c * self.strides[axis];
        }
        Ok(id)
    }

    /// Active input indices of the one-hot encoding (one per axis).
    #[inline]
    pub fn encode_into(&self, id: usize, out: &mut Vec<usize>) {
        for axis in 0..self.cfg.dim {
            out.push(axis * self.cfg.side + self.coord(id, axis));
        }
    }

    #[inline]
    pub fn can_increment(&self, id: usize, axis: usize) -> bool {
        self.coord(id, axis) + 1 < self.cfg.side
    }

    /// Legality of each action index at `id`.
    #[inline]
    pub fn legal(&self, id: usize, action: usize) -> bool {
        action == self.cfg.dim || self.can_increment(id, action)
    }

    #[inline]
    pub fn step(&self, id: usize, axis: usize) -> usize {
        id + self.strides[axis]
    }

    #[inline]
    pub fn n_parents(&self, id: usize) -> usize {
        (0..self.cfg.dim).filter(|&a| self.coord(id, a) > 0).count()
    }

    #[inline]
    pub fn reward_of(&self, id: usize) -> f64 {
        let (mut centre, mut mode) = (true, true);
        for axis in 0..self.cfg.dim {
            let c = self.coord(id, axis);
            centre &= self.centre_band[c];
            mode &= self.mode_band[c];
        }
        self.cfg.r0 + if centre { self.cfg.r1 } else { 0.0 } + if mode { self.cfg.r2 } else { 0.0 }
    }

    #[inline]
    pub fn log_reward_of(&self, id: usize) -> f64 {
        self.reward_of(id).ln()
    }

    #[inline]
    pub fn is_mode(&self, id: usize) -> bool {
        (0..self.cfg.dim).all(|a| self.mode_band[self.coord(id, a)])
    }

    pub fn reward(&self, coords: &[usize]) -> Result<f64> {
        Ok(self.reward_of(self.id_of(coords)?))
    }

    pub fn children(&self, state: &GridState) -> Result<Vec<(GridAction, GridState)>> {
        if state.terminated {
            return Err(Error::InvalidState("terminated states have no children".into()));
        }
        self.id_of(&state.coords)?;
        let mut out = Vec::with_capacity(self.cfg.dim + 1);
        for axis in 0..self.cfg.dim {
            if state.coords[axis] + 1 < self.cfg.side {
                let mut coords = state.coords.clone();
                coords[axis] += 1;
                out.push((
                    GridAction::Increment(axis),
                    GridState {
                        coords,
                        terminated: false,
                    },
                ));
            }
        }
        out.push((
            GridAction::Terminate,
            GridState {
                coords: state.coords.clone(),
                terminated: true,
            },
        ));
        Ok(out)
    }

    /// Predecessor grid states of a non-terminated state.
    pub fn parents(&self, state: &GridState) -> Result<Vec<GridState>> {
        if state.terminated {
            return Err(Error::InvalidState("parents() takes a non-terminated state".into()));
        }
        self.id_of(&state.coords)?;
        Ok((0..self.cfg.dim)
            .filter(|&a| state.coords[a] > 0)
            .map(|a| {
                let mut coords = state.coords.clone();
                coords[a] -= 1;
                GridState {
                    coords,
                    terminated: false,
                }
            })
            .collect())
    }

    /// Builds a trajectory from its visited states, checking every move.
    pub fn trajectory_from_states(&self, states: Vec<usize>) -> Result<GridTrajectory> {
        if states.first() != Some(&0) {
            return Err(Error::InvalidTrajectory("trajectory must start at the origin".into()));
        }
        let mut actions = Vec::with_capacity(states.len());
        for w in states.windows(2) {
            let (from, to) = (w[0], w[1]);
            let axis = (0..self.cfg.dim)
                .find(|&a| self.can_increment(from, a) && self.step(from, a) == to)
                .ok_or_else(|| Error::InvalidTrajectory(format!("no single increment from {from} to {to}")))?;
            actions.push(axis);
        }
        if let Some(&last) = states.last() {
            if last >= self.n_states {
                return Err(Error::InvalidTrajectory(format!("state {last} out of range")));
            }
        }
        actions.push(self.cfg.dim);
        Ok(GridTrajectory { states, actions })
    }

    /// Uniform backward log-probability `log P_B(τ | x)`: each non-initial
    /// grid state contributes `-log(#parents)`, un-terminating contributes 0.
    pub fn uniform_backward_logprob(&self, traj: &GridTrajectory) -> Result<f64> {
        self.validate_trajectory(traj)?;
        Ok(self.backward_logprob_unchecked(traj))
    }

    pub(crate) fn backward_logprob_unchecked(&self, traj: &GridTrajectory) -> f64 {
        traj.states[1..]
            .iter()
            .map(|&s| -(self.n_parents(s) as f64).ln())
            .sum()
    }

    pub fn validate_trajectory(&self, traj: &GridTrajectory) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrajectory(m));
        if traj.states.is_empty() || traj.states.len() != traj.actions.len() {
            return bad("states and actions must be non-empty and aligned".into());
        }
        if traj.states[0] != 0 {
            return bad("trajectory must start at the origin".into());
        }
        for k in 0..traj.states.len() {
            let (s, a) = (traj.states[k], traj.actions[k]);
            if s >= self.n_states {
                return bad(format!("state {s} out of range"));
            }
            let last = k + 1 == traj.states.len();
            if last {
                if a != self.cfg.dim {
                    return bad("trajectory must end with terminate".into());
                }
            } else if a >= self.cfg.dim || !self.can_increment(s, a) || self.step(s, a) != traj.states[k + 1] {
                return bad(format!("illegal move {a} at state {s}"));
            }
        }
        Ok(())
    }

    /// Samples `τ ~ P_B(· | x)` under the uniform backward policy.
    pub fn sample_backward<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> Result<GridTrajectory> {
        if x >= self.n_states {
            return Err(Error::InvalidState(format!("terminal {x} out of range")));
        }
        let mut rev = vec![x];
        let mut axes = Vec::with_capacity(self.cfg.dim);
        let mut cur = x;
        while cur != 0 {
            axes.clear();
            axes.extend((0..self.cfg.dim).filter(|&a| self.coord(cur, a) > 0));
            let axis = axes[rng.random_range(0..axes.len())];
            cur -= self.strides[axis];
            rev.push(cur);
        }
        rev.reverse();
        self.trajectory_from_states(rev)
    }

    /// Walks `steps` moves back from `x` under uniform `P_B`, returning the
    /// reached state and the visited path `s, …, x`.
    pub fn backtrack<R: Rng + ?Sized>(&self, x: usize, steps: usize, rng: &mut R) -> Vec<usize> {
        let mut rev = vec![x];
        let mut cur = x;
        let mut axes = Vec::with_capacity(self.cfg.dim);
        for _ in 0..steps {
            if cur == 0 {
                break;
            }
            axes.clear();
            axes.extend((0..self.cfg.dim).filter(|&a| self.coord(cur, a) > 0));
            let axis = axes[rng.random_range(0..axes.len())];
            cur -= self.strides[axis];
            rev.push(cur);
        }
        rev.reverse();
        rev
    }

    fn ensure_enumerable(&self, cap: u64) -> Result<()> {
        let size = self.cfg.state_count();
        if size > cap as u128 {
            Err(Error::EnumerationCap { size, cap })
        } else {
            Ok(())
        }
    }

    /// Every terminal state exactly once, as flat ids.
    pub fn enumerate_terminal_states(&self, cap: u64) -> Result<TerminalStates<'_>> {
        self.ensure_enumerable(cap)?;
        Ok(TerminalStates { env: self, next: 0 })
    }

    /// Flat ids of the states with reward `r0 + r2`.
    pub fn mode_set(&self, cap: u64) -> Result<Vec<usize>> {
        let target = self.cfg.r0 + self.cfg.r2;
        Ok(self
            .enumerate_terminal_states(cap)?
            .filter(|&id| self.reward_of(id) == target)
            .collect())
    }

    /// `R(x) / Z` indexed by flat id.
    pub fn exact_target(&self, cap: u64) -> Result<Vec<f64>> {
        let rewards: Vec<f64> = self.enumerate_terminal_states(cap)?.map(|id| self.reward_of(id)).collect();
        let z: f64 = rewards.iter().sum();
        Ok(rewards.into_iter().map(|r| r / z).collect())
    }

    pub fn log_partition(&self, cap: u64) -> Result<f64> {
        let z: f64 = self.enumerate_terminal_states(cap)?.map(|id| self.reward_of(id)).sum();
        Ok(z.ln())
    }

    /// Exact optimal flows under the uniform backward policy, obtained by a
    /// backward pass over the DAG in decreasing flat-id order.
    pub fn exact_flow_policy(&self, cap: u64) -> Result<TabularPolicy> {
        self.ensure_enumerable(cap)?;
        let n = self.n_states;
        let na = self.n_actions();
        let mut log_flow = vec![f64::NEG_INFINITY; n];
        let mut log_pf = vec![f64::NEG_INFINITY; n * na];
        let mut edge = vec![f64::NEG_INFINITY; na];
        for id in (0..n).rev() {
            edge.iter_mut().for_each(|e| *e = f64::NEG_INFINITY);
            edge[self.cfg.dim] = self.log_reward_of(id);
            for axis in 0..self.cfg.dim {
                if self.can_increment(id, axis) {
                    let child = self.step(id, axis);
                    edge[axis] = log_flow[child] - (self.n_parents(child) as f64).ln();
                }
            }
            let total = log_sum_exp(&edge);
            log_flow[id] = total;
            for a in 0..na {
                log_pf[id * na + a] = edge[a] - total;
            }
        }
        Ok(TabularPolicy {
            dim: self.cfg.dim,
            log_pf,
            log_z: log_flow[0],
            log_flow,
        })
    }

    /// Writes `coords..., reward, probability` rows for every state.
    pub fn write_target_csv(&self, path: &Path, cap: u64) -> Result<()> {
        let probs = self.exact_target(cap)?;
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.cfg.dim).map(|a| format!("x{a}")).collect();
        header.push("reward".into());
        header.push("probability".into());
        header.push("is_mode".into());
        w.write_record(&header)?;
        for (id, p) in probs.iter().enumerate() {
            let mut row: Vec<String> = self.coords_of(id).iter().map(|c| c.to_string()).collect();
            row.push(format!("{:?}", self.reward_of(id)));
            row.push(format!("{p:?}"));
            row.push(u8::from(self.is_mode(id)).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rolls out `n` trajectories from the origin under `policy`. With
    /// probability `epsilon` each step takes a uniformly random legal action.
    pub fn sample_trajectories<P, R>(
        &self,
        policy: &P,
        n: usize,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Vec<GridTrajectory>>
    where
        P: GridForwardPolicy + ?Sized,
        R: Rng + ?Sized,
    {
        self.continue_trajectories(policy, vec![vec![0]; n], epsilon, rng)
    }

    /// Extends each partial path (which must start at the origin) until it
    /// terminates.
    pub fn continue_trajectories<P, R>(
        &self,
        policy: &P,
        prefixes: Vec<Vec<usize>>,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Vec<GridTrajectory>>
    where
        P: GridForwardPolicy + ?Sized,
        R: Rng + ?Sized,
    {
        let na = self.n_actions();
        let mut paths = prefixes;
        let mut actions: Vec<Vec<usize>> = paths
            .iter()
            .map(|p| {
                let mut a = Vec::with_capacity(p.len() + 8);
                for w in p.windows(2) {
                    let axis = (0..self.cfg.dim).find(|&ax| self.step(w[0], ax) == w[1]).unwrap_or(0);
                    a.push(axis);
                }
                a
            })
            .collect();
        let mut active: Vec<usize> = (0..paths.len()).collect();
        let mut current = Vec::with_capacity(paths.len());
        let mut logp = Vec::new();
        let mut legal = vec![false; na];
        while !active.is_empty() {
            current.clear();
            current.extend(active.iter().map(|&k| *paths[k].last().expect("non-empty path")));
            policy.action_log_probs(self, &current, &mut logp)?;
            let mut still = Vec::with_capacity(active.len());
            for (row, &k) in active.iter().enumerate() {
                let s = current[row];
                for (a, l) in legal.iter_mut().enumerate() {
                    *l = self.legal(s, a);
                }
                let a = choose_action(&logp[row * na..(row + 1) * na], &legal, epsilon, rng);
                actions[k].push(a);
                if a == self.cfg.dim {
                    continue;
                }
                paths[k].push(self.step(s, a));
                still.push(k);
            }
            active = still;
        }
        Ok(paths
            .into_iter()
            .zip(actions)
            .map(|(states, actions)| GridTrajectory { states, actions })
            .collect())
    }

    /// `log P_F(τ)` of a trajectory under `policy`.
    pub fn trajectory_log_pf<P: GridForwardPolicy + ?Sized>(&self, policy: &P, traj: &GridTrajectory) -> Result<f64> {
        self.validate_trajectory(traj)?;
        let na = self.n_actions();
        let mut logp = Vec::new();
        policy.action_log_probs(self, &traj.states, &mut logp)?;
        Ok(traj
            .actions
            .iter()
            .enumerate()
            .map(|(row, &a)| logp[row * na + a])
            .sum())
    }
}

pub struct TerminalStates<'a> {
    env: &'a GridEnv,
    next: usize,
}

impl Iterator for TerminalStates<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.next < self.env.n_states {
            self.next += 1;
            Some(self.next - 1)
        } else {
            None
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.env.n_states - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for TerminalStates<'_> {}

/// A forward policy over the hypergrid's actions.
pub trait GridForwardPolicy {
    /// Writes row-major `(states.len(), dim + 1)` action log-probabilities
    /// into `out`; illegal actions get `-inf`.
    fn action_log_probs(&self, env: &GridEnv, states: &[usize], out: &mut Vec<f64>) -> Result<()>;
}

/// Forward policy and state flows stored per state.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    dim: usize,
    pub log_pf: Vec<f64>,
    pub log_flow: Vec<f64>,
    pub log_z: f64,
}

impl TabularPolicy {
    /// Policy from a row-major `(states, dim + 1)` table; flows are left empty.
    pub fn from_log_probs(dim: usize, log_pf: Vec<f64>) -> Self {
        Self {
            dim,
            log_pf,
            log_flow: Vec::new(),
            log_z: 0.0,
        }
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        self.log_pf[state * (self.dim + 1) + action]
    }

    pub fn log_flow(&self, state: usize) -> f64 {
        self.log_flow[state]
    }

    /// Exact terminating distribution, by forward propagation of state mass.
    pub fn terminating_distribution(&self, env: &GridEnv) -> Vec<f64> {
        let mut mass = vec![0.0; env.n_states()];
        let mut term = vec![0.0; env.n_states()];
        mass[0] = 1.0;
        for id in 0..env.n_states() {
            let m = mass[id];
            if m == 0.0 {
                continue;
            }
            term[id] += m * self.log_prob(id, self.dim).exp();
            for axis in 0..self.dim {
                if env.can_increment(id, axis) {
                    mass[env.step(id, axis)] += m * self.log_prob(id, axis).exp();
                }
            }
        }
        term
    }
}

impl GridForwardPolicy for TabularPolicy {
    fn action_log_probs(&self, env: &GridEnv, states: &[usize], out: &mut Vec<f64>) -> Result<()> {
        ensure_dim("tabular policy dim", self.dim, env.dim())?;
        let na = self.dim + 1;
        out.clear();
        for &s in states {
            if s * na >= self.log_pf.len() {
                return Err(Error::InvalidState(format!("state {s} outside the table")));
            }
            out.extend_from_slice(&self.log_pf[s * na..(s + 1) * na]);
        }
        Ok(())
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Writes visited coordinates of each trajectory as `traj, step, x0, x1, …` rows.
pub fn write_trajectories_csv<W: Write>(env: &GridEnv, trajs: &[GridTrajectory], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["trajectory".to_string(), "step".to_string()];
    header.extend((0..env.dim()).map(|a| format!("x{a}")));
    w.write_record(&header)?;
    for (k, t) in trajs.iter().enumerate() {
        for (step, &s) in t.states().iter().enumerate() {
            let mut row = vec![k.to_string(), step.to_string()];
            row.extend(env.coords_of(s).iter().map(|c| c.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
