//! Run configuration, read from a sectioned `key = value` (TOML) file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::continuous::EnergySpec;
use crate::error::{Error, Result};
use crate::exploration::BehaviorSchedule;
use crate::grid::GridConfig;
use crate::local_search::LocalSearchConfig;
use crate::nn::{Activation, AdamConfig};
use crate::teacher::TeacherRewardConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Grid,
    Gmm25,
    Manywell,
}

impl Task {
    pub fn energy(self) -> Option<EnergySpec> {
        match self {
            Task::Grid => None,
            Task::Gmm25 => Some(EnergySpec::Gmm25),
            Task::Manywell => Some(EnergySpec::Manywell),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Tb,
    Db,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exploration {
    OnPolicy,
    Epsilon,
    Prt,
    Per,
    PerStar,
    Teacher,
    #[serde(rename = "teacher+local_search", alias = "teacher_local_search")]
    TeacherLocalSearch,
}

impl Exploration {
    pub fn uses_teacher(self) -> bool {
        matches!(self, Exploration::Teacher | Exploration::TeacherLocalSearch)
    }

    /// Variants that add one replay gradient step per fresh batch.
    pub fn replays_every_round(self) -> bool {
        matches!(self, Exploration::Prt | Exploration::Per | Exploration::PerStar)
    }
}

macro_rules! text_enum {
    ($ty:ty) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let quoted = toml::Value::String(s.to_string());
                quoted
                    .try_into()
                    .map_err(|_| Error::InvalidConfig(format!("unknown {} `{s}`", stringify!($ty).to_lowercase())))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match toml::Value::try_from(self) {
                    Ok(toml::Value::String(s)) => f.write_str(&s),
                    _ => Err(fmt::Error),
                }
            }
        }
    };
}

text_enum!(Task);
text_enum!(Objective);
text_enum!(Exploration);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden widths; defaults to two layers of 256 (grid), 64 (gmm25) or
    /// 256 (manywell).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Defaults to leaky-relu on the grid and gelu for diffusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default = "default_lr_policy")]
    pub lr_policy: f64,
    /// Step size of `log Z` (trajectory balance).
    #[serde(default = "default_lr_log_z")]
    pub lr_log_z: f64,
    #[serde(default = "default_lr_policy")]
    pub lr_teacher: f64,
    #[serde(default = "default_lr_log_z")]
    pub lr_teacher_log_z: f64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_lr_policy() -> f64 {
    1e-3
}
fn default_lr_log_z() -> f64 {
    1e-1
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: None,
            activation: None,
            lr_policy: default_lr_policy(),
            lr_log_z: default_lr_log_z(),
            lr_teacher: default_lr_policy(),
            lr_teacher_log_z: default_lr_log_z(),
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSection {
    #[serde(default = "default_sde_steps")]
    pub steps: usize,
    /// Noise scale σ; defaults to √5 for gmm25 and 1 for manywell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Cap on training rounds.
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u64,
}

fn default_sde_steps() -> usize {
    100
}
fn default_max_rounds() -> u64 {
    25_000
}

impl Default for SdeSection {
    fn default() -> Self {
        Self {
            steps: default_sde_steps(),
            sigma: None,
            max_rounds: default_max_rounds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSection {
    /// Defaults to `floor(0.1 |X|)` on the grid, 5000 (gmm25), 20000 (manywell).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    /// Defaults to `len / 100`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_shift: Option<f64>,
}

impl Default for BufferSection {
    fn default() -> Self {
        Self {
            capacity: None,
            rank_shift: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Method {
    /// Empirical frequencies of fresh rollouts.
    Sampled,
    /// Exact terminating distribution by mass propagation.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate every time this fraction of the budget has been spent.
    #[serde(default = "default_every_fraction")]
    pub every_fraction: f64,
    #[serde(default = "default_l1_samples")]
    pub l1_samples: usize,
    #[serde(default = "default_l1_method")]
    pub l1_method: L1Method,
    /// Samples for ELBO / ELBO-IS / EUBO; 0 disables. Defaults to 0 on the
    /// grid and 2000 for diffusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_samples: Option<usize>,
    /// Refuse exact grid tables above this many states.
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
}

fn default_every_fraction() -> f64 {
    0.02
}
fn default_l1_samples() -> usize {
    100_000
}
fn default_l1_method() -> L1Method {
    L1Method::Sampled
}
fn default_cap() -> u64 {
    crate::grid::DEFAULT_ENUMERATION_CAP
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every_fraction: default_every_fraction(),
            l1_samples: default_l1_samples(),
            l1_method: default_l1_method(),
            bound_samples: None,
            enumeration_cap: default_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_teacher_eps")]
    pub epsilon: f64,
    /// Defaults to 0 on the grid and 0.5 for diffusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Defaults to 0.9 for diffusion and none on the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_quantile: Option<f64>,
    #[serde(default = "default_threshold_samples")]
    pub threshold_samples: usize,
}

fn default_c() -> f64 {
    19.0
}
fn default_teacher_eps() -> f64 {
    1e-4
}
fn default_n_mc() -> usize {
    1
}
fn default_threshold_samples() -> usize {
    1024
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            c: default_c(),
            epsilon: default_teacher_eps(),
            alpha: None,
            n_mc: default_n_mc(),
            threshold_quantile: None,
            threshold_samples: default_threshold_samples(),
        }
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default = "default_exploration")]
    pub exploration: Exploration,
    #[serde(default)]
    pub seed: u64,
    /// Reward-call budget; defaults to 96,000 on the grid (384,000 for
    /// d=4, H=32) and `max_rounds · batch_size` for diffusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    /// Defaults to 16 on the grid and 300 for diffusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Student : Teacher : buffer; defaults to 1:1:0 (grid teacher), 3:1:2
    /// (diffusion teacher) and 1:0:0 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<BehaviorSchedule>,
    /// ε-exploration rate used by `exploration = "epsilon"`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub sde: SdeSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub buffer: BufferSection,
    #[serde(default)]
    pub local_search: LocalSearchConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_objective() -> Objective {
    Objective::Tb
}
fn default_exploration() -> Exploration {
    Exploration::OnPolicy
}
fn default_epsilon() -> f64 {
    0.01
}

impl RunConfig {
    /// A grid run with every other setting at its default.
    pub fn grid(dim: usize, side: usize, exploration: Exploration, seed: u64) -> Self {
        Self {
            task: Task::Grid,
            objective: Objective::Tb,
            exploration,
            seed,
            budget: None,
            batch_size: None,
            ratio: None,
            epsilon: default_epsilon(),
            grid: Some(GridConfig::new(dim, side)),
            sde: SdeSection::default(),
            model: ModelSection::default(),
            teacher: TeacherSection::default(),
            buffer: BufferSection::default(),
            local_search: LocalSearchConfig::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn diffusion(task: Task, exploration: Exploration, seed: u64) -> Self {
        Self {
            task,
            grid: None,
            ..Self::grid(1, 2, exploration, seed)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn is_grid(&self) -> bool {
        self.task == Task::Grid
    }

    pub fn grid_config(&self) -> Result<&GridConfig> {
        self.grid
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("grid task needs a [grid] section".into()))
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.is_grid() { 16 } else { 300 })
    }

    pub fn budget(&self) -> u64 {
        match (self.budget, &self.grid) {
            (Some(b), _) => b,
            (None, Some(g)) if self.is_grid() => {
                if g.dim == 4 && g.side == 32 {
                    384_000
                } else {
                    96_000
                }
            }
            _ => self.sde.max_rounds * self.batch_size() as u64,
        }
    }

    pub fn schedule(&self) -> BehaviorSchedule {
        if let Some(r) = self.ratio {
            return r;
        }
        let (s, t, b) = match (self.exploration.uses_teacher(), self.is_grid()) {
            (true, true) => (1, 1, 0),
            (true, false) => (3, 1, 2),
            (false, _) => (1, 0, 0),
        };
        BehaviorSchedule::new(s, t, b).expect("non-empty default ratio")
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.model.hidden.clone().unwrap_or_else(|| match self.task {
            Task::Gmm25 => vec![64, 64],
            _ => vec![256, 256],
        })
    }

    pub fn activation(&self) -> Activation {
        self.model.activation.unwrap_or(if self.is_grid() {
            Activation::LeakyRelu
        } else {
            Activation::Gelu
        })
    }

    pub fn teacher_reward(&self) -> TeacherRewardConfig {
        let t = &self.teacher;
        let alpha = match self.objective {
            Objective::Db => 0.0,
            Objective::Tb => t.alpha.unwrap_or(if self.is_grid() { 0.0 } else { 0.5 }),
        };
        TeacherRewardConfig {
            c: t.c,
            epsilon: t.epsilon,
            alpha,
            n_mc: t.n_mc,
            threshold_quantile: t.threshold_quantile.or(if self.is_grid() { None } else { Some(0.9) }),
            threshold_samples: t.threshold_samples,
        }
    }

    /// Whether rounds drawing from the buffer appear in the schedule or as
    /// replay steps.
    pub fn uses_buffer(&self) -> bool {
        self.exploration.replays_every_round() || (self.exploration.uses_teacher() && self.schedule().uses_buffer())
    }

    pub fn buffer_capacity(&self) -> Result<usize> {
        if let Some(c) = self.buffer.capacity {
            return Ok(c);
        }
        Ok(match self.task {
            Task::Grid => {
                let n = self.grid_config()?.state_count();
                ((n / 10) as usize).max(1)
            }
            Task::Gmm25 => 5_000,
            Task::Manywell => 20_000,
        })
    }

    pub fn bound_samples(&self) -> usize {
        self.eval.bound_samples.unwrap_or(if self.is_grid() { 0 } else { 2000 })
    }

    /// Copy with every task-dependent default written out explicitly.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        out.budget = Some(self.budget());
        out.batch_size = Some(self.batch_size());
        out.ratio = Some(self.schedule());
        out.model.hidden = Some(self.hidden());
        out.model.activation = Some(self.activation());
        let tr = self.teacher_reward();
        out.teacher.alpha = Some(tr.alpha);
        out.teacher.threshold_quantile = tr.threshold_quantile;
        out.eval.bound_samples = Some(self.bound_samples());
        if self.uses_buffer() || self.buffer.capacity.is_some() {
            out.buffer.capacity = Some(self.buffer_capacity()?);
        }
        if let Some(energy) = self.task.energy() {
            out.sde.sigma = Some(self.sde.sigma.unwrap_or(crate::continuous::SdeConfig::for_energy(energy).sigma));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size() == 0 {
            return bad("batch_size must be positive");
        }
        match (self.task, &self.grid) {
            (Task::Grid, Some(g)) => g.validate()?,
            (Task::Grid, None) => return bad("grid task needs a [grid] section"),
            (_, Some(_)) => return bad("[grid] applies to the grid task only"),
            _ => {}
        }
        if !self.is_grid() && self.objective == Objective::Db {
            return bad("detailed balance is implemented for the grid task only");
        }
        if self.exploration == Exploration::PerStar && self.objective != Objective::Db {
            return bad("per_star requires objective = \"db\"");
        }
        if self.exploration == Exploration::TeacherLocalSearch && !self.is_grid() {
            return bad("local search is implemented for the grid task only");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        let sched = self.schedule();
        sched.validate()?;
        if sched.student + sched.teacher == 0 {
            return bad("ratio must include the student or the teacher");
        }
        if !self.exploration.uses_teacher() && sched.teacher > 0 {
            return bad("a teacher share in the ratio needs exploration = \"teacher\"");
        }
        if self.exploration.replays_every_round() && sched.buffer > 0 {
            return bad("replay variants add their own replay step; leave the buffer share at 0");
        }
        self.teacher_reward().validate()?;
        self.local_search.validate()?;
        if !(self.eval.every_fraction > 0.0 && self.eval.every_fraction <= 1.0) {
            return bad("eval.every_fraction must lie in (0, 1]");
        }
        if let Some(h) = &self.model.hidden {
            if h.is_empty() || h.contains(&0) {
                return bad("model.hidden needs positive widths");
            }
        }
        if self.sde.steps < 2 {
            return bad("sde.steps must be >= 2");
        }
        if self.uses_buffer() && self.buffer_capacity()? == 0 {
            return bad("buffer capacity must be positive");
        }
        Ok(())
    }
}

/// Maps a TOML error to a config error naming the key and 1-based line.
fn config_error(text: &str, err: &toml::de::Error) -> Error {
    let message = err.message().to_string();
    let (line, line_text) = match err.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            (line, text.lines().nth(line - 1).unwrap_or(""))
        }
        None => (0, ""),
    };
    let key = message
        .split('`')
        .nth(1)
        .filter(|_| message.starts_with("unknown field"))
        .map(str::to_string)
        .or_else(|| line_text.split_once('=').map(|(k, _)| k.trim().to_string()))
        .unwrap_or_else(|| line_text.trim().to_string());
    Error::Config { key, line, message }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_grid_config_gets_defaults() {
        let cfg = RunConfig::from_toml_str(
            "task = \"grid\"\nexploration = \"teacher\"\n[grid]\ndim = 2\nside = 128\n",
        )
        .unwrap();
        assert_eq!(cfg.budget(), 96_000);
        assert_eq!(cfg.batch_size(), 16);
        assert_eq!(cfg.schedule().to_string(), "1:1:0");
        assert_eq!(cfg.teacher_reward().alpha, 0.0);
        assert_eq!(cfg.teacher_reward().threshold_quantile, None);
        assert_eq!(cfg.hidden(), vec![256, 256]);
        assert_eq!(cfg.activation(), Activation::LeakyRelu);
        assert_eq!(cfg.buffer_capacity().unwrap(), 1638);
        assert!(!cfg.uses_buffer());
    }

    #[test]
    fn diffusion_defaults() {
        let cfg = RunConfig::from_toml_str("task = \"gmm25\"\nexploration = \"teacher\"\n").unwrap();
        assert_eq!(cfg.schedule().to_string(), "3:1:2");
        assert_eq!(cfg.teacher_reward().alpha, 0.5);
        assert_eq!(cfg.teacher_reward().threshold_quantile, Some(0.9));
        assert_eq!(cfg.buffer_capacity().unwrap(), 5000);
        assert_eq!(cfg.hidden(), vec![64, 64]);
        assert_eq!(cfg.bound_samples(), 2000);
        assert!(cfg.uses_buffer());
        let big = RunConfig::from_toml_str("task = \"grid\"\n[grid]\ndim = 4\nside = 32\n").unwrap();
        assert_eq!(big.budget(), 384_000);
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let err = RunConfig::from_toml_str("task = \"grid\"\n[grid]\ndim = 2\nsied = 8\n").unwrap_err();
        match err {
            Error::Config { key, line, .. } => {
                assert_eq!(key, "sied");
                assert_eq!(line, 4);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_value_names_key_and_line() {
        let err = RunConfig::from_toml_str("task = \"grid\"\nseed = \"seven\"\n[grid]\ndim = 2\nside = 8\n").unwrap_err();
        match err {
            Error::Config { key, line, .. } => {
                assert_eq!(key, "seed");
                assert_eq!(line, 2);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn full_config_round_trips() {
        let mut cfg = RunConfig::grid(4, 16, Exploration::TeacherLocalSearch, 3);
        cfg.budget = Some(1000);
        cfg.ratio = Some(BehaviorSchedule::new(2, 1, 0).unwrap());
        cfg.model.hidden = Some(vec![32, 32]);
        cfg.teacher.alpha = Some(0.25);
        cfg.buffer.rank_shift = Some(0.5);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        let res = cfg.resolved().unwrap();
        assert_eq!(RunConfig::from_toml_str(&res.to_toml_string().unwrap()).unwrap(), res);
        assert_eq!(res.resolved().unwrap(), res);
        let diff = RunConfig::diffusion(Task::Manywell, Exploration::Per, 1);
        assert_eq!(RunConfig::from_toml_str(&diff.to_toml_string().unwrap()).unwrap(), diff);
    }

    #[test]
    fn invalid_combinations() {
        let mut cfg = RunConfig::grid(2, 8, Exploration::PerStar, 0);
        assert!(cfg.validate().is_err());
        cfg.objective = Objective::Db;
        cfg.validate().unwrap();
        let mut cfg = RunConfig::grid(2, 8, Exploration::OnPolicy, 0);
        cfg.ratio = Some(BehaviorSchedule::new(1, 1, 0).unwrap());
        assert!(cfg.validate().is_err());
        assert!(RunConfig::from_toml_str("task = \"grid\"\n").is_err());
    }

    #[test]
    fn enums_parse_from_text() {
        assert_eq!("teacher+local_search".parse::<Exploration>().unwrap(), Exploration::TeacherLocalSearch);
        assert_eq!("per_star".parse::<Exploration>().unwrap(), Exploration::PerStar);
        assert_eq!(Exploration::OnPolicy.to_string(), "on_policy");
        assert_eq!("gmm25".parse::<Task>().unwrap(), Task::Gmm25);
        assert!("grd".parse::<Task>().is_err());
    }
}
