//! Behavior-policy scheduling, ε-exploration and rank-prioritized replay.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which model (or buffer) generates a round's training trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Student,
    Teacher,
    Buffer,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Student => "student",
            Source::Teacher => "teacher",
            Source::Buffer => "buffer",
        })
    }
}

/// Repeating `student : teacher : buffer` pattern, e.g. `2:1:3` expands to
/// `S S T B B B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BehaviorSchedule {
    pub student: u32,
    pub teacher: u32,
    pub buffer: u32,
}

impl BehaviorSchedule {
    pub fn new(student: u32, teacher: u32, buffer: u32) -> Result<Self> {
        let s = Self {
            student,
            teacher,
            buffer,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period() == 0 {
            return Err(Error::InvalidConfig("behavior ratio must have a positive sum".into()));
        }
        Ok(())
    }

    pub fn period(&self) -> u64 {
        self.student as u64 + self.teacher as u64 + self.buffer as u64
    }

    pub fn uses_teacher(&self) -> bool {
        self.teacher > 0
    }

    pub fn uses_buffer(&self) -> bool {
        self.buffer > 0
    }

    /// Source for `round`, falling back to the Student while the buffer is empty.
    pub fn select_source(&self, round: u64, buffer_ready: bool) -> Source {
        let slot = round % self.period();
        let src = if slot < self.student as u64 {
            Source::Student
        } else if slot < self.student as u64 + self.teacher as u64 {
            Source::Teacher
        } else {
            Source::Buffer
        };
        if src == Source::Buffer && !buffer_ready {
            Source::Student
        } else {
            src
        }
    }
}

impl fmt::Display for BehaviorSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.student, self.teacher, self.buffer)
    }
}

impl std::str::FromStr for BehaviorSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let bad = || Error::InvalidConfig(format!("behavior ratio `{s}` is not of the form a:b:c"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<u32> = parts
            .iter()
            .map(|p| p.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        BehaviorSchedule::new(nums[0], nums[1], nums[2])
    }
}

impl TryFrom<String> for BehaviorSchedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BehaviorSchedule> for String {
    fn from(s: BehaviorSchedule) -> String {
        s.to_string()
    }
}

/// Samples an action index from `log_probs` restricted to `legal`; with
/// probability `epsilon` a uniformly random legal action is taken instead.
/// No extra randomness is drawn when `epsilon == 0`.
pub fn choose_action<R: Rng + ?Sized>(log_probs: &[f64], legal: &[bool], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        let n_legal = legal.iter().filter(|&&l| l).count();
        let pick = rng.random_range(0..n_legal);
        return legal
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .nth(pick)
            .map(|(a, _)| a)
            .expect("at least one legal action");
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, (&lp, &ok)) in log_probs.iter().zip(legal).enumerate() {
        if !ok {
            continue;
        }
        last = a;
        acc += lp.exp();
        if u < acc {
            return a;
        }
    }
    last
}

/// Adds `N(0, epsilon · step_variance)` noise to every coordinate of a
/// sampled continuous step.
pub fn perturb_gaussian<R: Rng + ?Sized>(x: &mut [f64], epsilon: f64, step_variance: f64, rng: &mut R) {
    if epsilon <= 0.0 {
        return;
    }
    let sd = (epsilon * step_variance).sqrt();
    for v in x.iter_mut() {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        *v += sd * z;
    }
}

/// What a buffer ranks its entries by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityKey {
    /// Task reward (PRT).
    Reward,
    /// Teacher reward (PER).
    TeacherReward,
    /// Absolute detailed-balance discrepancy of a stored transition (PER*).
    TdError,
}

pub trait Prioritized {
    fn priority(&self, key: PriorityKey) -> f64;
}

/// A terminal object with its task and Teacher log-rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry<P> {
    pub payload: P,
    pub log_reward: f64,
    pub teacher_log_reward: f64,
}

impl<P> Prioritized for ReplayEntry<P> {
    fn priority(&self, key: PriorityKey) -> f64 {
        match key {
            PriorityKey::Reward => self.log_reward,
            PriorityKey::TeacherReward => self.teacher_log_reward,
            PriorityKey::TdError => f64::NAN,
        }
    }
}

/// One stored state transition for PER*.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEntry {
    pub state: usize,
    pub action: usize,
    /// Successor grid state, `None` for a terminate move.
    pub next_state: Option<usize>,
    /// Task log-reward of `state` when the move terminates.
    pub terminal_log_reward: Option<f64>,
    pub td_error: f64,
}

impl Prioritized for TransitionEntry {
    fn priority(&self, key: PriorityKey) -> f64 {
        match key {
            PriorityKey::TdError => self.td_error.abs(),
            _ => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stored<T> {
    pub insertion_index: u64,
    pub item: T,
}

/// Capacity-bounded FIFO queue sampled with rank-based priorities: the
/// entry at rank `k` (1-based, descending priority, ties broken newest
/// first) is drawn with weight `1 / (k + rank_shift)`, with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    entries: VecDeque<Stored<T>>,
    capacity: usize,
    key: PriorityKey,
    rank_shift: Option<f64>,
    inserted: u64,
}

impl<T: Prioritized> ReplayBuffer<T> {
    pub fn new(capacity: usize, key: PriorityKey) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("buffer capacity must be positive".into()));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
            key,
            rank_shift: None,
            inserted: 0,
        })
    }

    /// Fixes the rank shift; by default it is `len / 100`.
    pub fn with_rank_shift(mut self, shift: Option<f64>) -> Self {
        self.rank_shift = shift;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn key(&self) -> PriorityKey {
        self.key
    }

    pub fn entries(&self) -> impl Iterator<Item = &Stored<T>> {
        self.entries.iter()
    }

    pub fn insert<I: IntoIterator<Item = T>>(&mut self, batch: I) {
        for item in batch {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(Stored {
                insertion_index: self.inserted,
                item,
            });
            self.inserted += 1;
        }
    }

    /// Ordinal ranks (1-based) of each stored entry in queue order.
    pub fn ranks(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        let pri: Vec<f64> = self.entries.iter().map(|e| e.item.priority(self.key)).collect();
        order.sort_by(|&a, &b| pri[b].total_cmp(&pri[a]).then(b.cmp(&a)));
        let mut ranks = vec![0; order.len()];
        for (pos, &idx) in order.iter().enumerate() {
            ranks[idx] = pos + 1;
        }
        ranks
    }

    /// Sampling probability of each stored entry in queue order.
    pub fn probabilities(&self) -> Vec<f64> {
        let shift = self.rank_shift.unwrap_or(self.entries.len() as f64 / 100.0);
        let w: Vec<f64> = self.ranks().iter().map(|&k| 1.0 / (k as f64 + shift)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    /// Queue positions of `batch_size` draws with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let probs = self.probabilities();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        Ok((0..batch_size)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
            })
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&T>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| &self.entries[i].item)
            .collect())
    }
}

impl<P> ReplayBuffer<ReplayEntry<P>> {
    /// Writes `payload, reward, teacher_reward, rank` rows.
    pub fn write_csv<W: Write>(&self, out: W, payload: impl Fn(&P) -> String) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["insertion_index", "payload", "log_reward", "teacher_log_reward", "rank"])?;
        for (e, rank) in self.entries.iter().zip(self.ranks()) {
            w.write_record([
                e.insertion_index.to_string(),
                payload(&e.item.payload),
                format!("{:?}", e.item.log_reward),
                format!("{:?}", e.item.teacher_log_reward),
                rank.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
