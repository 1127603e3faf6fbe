//! The Teacher's reward, built from the Student's discrepancies.
//!
//! For a terminal object `x` and Student discrepancies `δ` of backward
//! trajectories ending in `x`:
//!
//! ```text
//! log R_T(x) = mean_τ log(ε + (1 + C·[δ(τ) > 0]) · δ(τ)²) + α · log R(x)
//! ```
//!
//! Positive `δ` means the backward flow exceeds the forward flow, i.e. the
//! Student undersamples `x`, and gets the extra `C` weight.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherRewardConfig {
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Quantile of untrained-Student log-rewards below which samples are
    /// kept out of the Teacher's batches.
    #[serde(default)]
    pub threshold_quantile: Option<f64>,
    /// Number of untrained-Student samples used to set the threshold.
    #[serde(default = "default_threshold_samples")]
    pub threshold_samples: usize,
}

fn default_c() -> f64 {
    19.0
}
fn default_epsilon() -> f64 {
    1e-4
}
fn default_alpha() -> f64 {
    0.5
}
fn default_n_mc() -> usize {
    1
}
fn default_threshold_samples() -> usize {
    1024
}

impl Default for TeacherRewardConfig {
    fn default() -> Self {
        Self {
            c: default_c(),
            epsilon: default_epsilon(),
            alpha: default_alpha(),
            n_mc: default_n_mc(),
            threshold_quantile: None,
            threshold_samples: default_threshold_samples(),
        }
    }
}

impl TeacherRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0 && self.epsilon > 0.0 && self.alpha >= 0.0 && self.n_mc >= 1) {
            return Err(Error::InvalidConfig(
                "teacher reward needs c >= 0, epsilon > 0, alpha >= 0, n_mc >= 1".into(),
            ));
        }
        if let Some(q) = self.threshold_quantile {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidConfig(format!("threshold quantile {q} not in [0, 1]")));
            }
            if self.threshold_samples == 0 {
                return Err(Error::InvalidConfig("threshold_samples must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `(1 + C·[δ > 0]) · δ²`
#[inline]
pub fn weighted_square(delta: f64, c: f64) -> f64 {
    let w = if delta > 0.0 { 1.0 + c } else { 1.0 };
    w * delta * delta
}

/// Teacher log-reward from the Student's TB discrepancies of `n_mc`
/// trajectories ending in `x`.
pub fn teacher_log_reward_tb(deltas: &[f64], log_reward_x: f64, cfg: &TeacherRewardConfig) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::Empty("teacher reward needs at least one discrepancy"));
    }
    let mean = deltas
        .iter()
        .map(|&d| (cfg.epsilon + weighted_square(d, cfg.c)).ln())
        .sum::<f64>()
        / deltas.len() as f64;
    ensure_finite("teacher log-reward", mean + cfg.alpha * log_reward_x)
}

/// Teacher log-reward for detailed balance: the weighted squares of every
/// transition of a trajectory are summed inside the log, then averaged over
/// trajectories. Reward mixing does not apply.
pub fn teacher_log_reward_db(per_trajectory_deltas: &[Vec<f64>], cfg: &TeacherRewardConfig) -> Result<f64> {
    if per_trajectory_deltas.is_empty() || per_trajectory_deltas.iter().any(Vec::is_empty) {
        return Err(Error::Empty("DB teacher reward needs non-empty transition lists"));
    }
    let mean = per_trajectory_deltas
        .iter()
        .map(|deltas| {
            let s: f64 = deltas.iter().map(|&d| weighted_square(d, cfg.c)).sum();
            (cfg.epsilon + s).ln()
        })
        .sum::<f64>()
        / per_trajectory_deltas.len() as f64;
    ensure_finite("DB teacher log-reward", mean)
}

/// `true` if a sample may enter the Teacher's gradient batch.
#[inline]
pub fn threshold_gate(log_reward_x: f64, r_threshold: Option<f64>) -> bool {
    match r_threshold {
        Some(t) => log_reward_x > t,
        None => true,
    }
}

/// Linearly interpolated quantile of `values` (`q` in `[0, 1]`).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of no values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alpha: f64) -> TeacherRewardConfig {
        TeacherRewardConfig {
            alpha,
            ..TeacherRewardConfig::default()
        }
    }

    #[test]
    fn stationary_value() {
        let c = cfg(0.5);
        let got = teacher_log_reward_tb(&[0.0], 2.0f64.ln(), &c).unwrap();
        assert!((got - (1e-4f64.ln() + 0.5 * 2.0f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn sign_weighting() {
        let c = cfg(0.0);
        let pos = teacher_log_reward_tb(&[0.5], 0.0, &c).unwrap();
        let neg = teacher_log_reward_tb(&[-0.5], 0.0, &c).unwrap();
        assert!((pos - 5.0001f64.ln()).abs() < 1e-12);
        assert!((neg - 0.2501f64.ln()).abs() < 1e-12);
        assert!(pos > neg);
    }

    #[test]
    fn monte_carlo_average() {
        let c = cfg(0.0);
        let two = teacher_log_reward_tb(&[0.5, -0.5], 0.0, &c).unwrap();
        assert!((two - 0.5 * (5.0001f64.ln() + 0.2501f64.ln())).abs() < 1e-12);
        assert!(teacher_log_reward_tb(&[], 0.0, &c).is_err());
    }

    #[test]
    fn db_examples() {
        let c = cfg(0.0);
        assert!((teacher_log_reward_db(&[vec![0.0, 0.0]], &c).unwrap() - 1e-4f64.ln()).abs() < 1e-15);
        let v = teacher_log_reward_db(&[vec![1.0, -1.0]], &c).unwrap();
        assert!((v - (1e-4f64 + 21.0).ln()).abs() < 1e-12);
        let w = teacher_log_reward_db(&[vec![-1.0, 1.0]], &c).unwrap();
        assert_eq!(v, w);
        assert!(teacher_log_reward_db(&[vec![]], &c).is_err());
        assert!(teacher_log_reward_db(&[], &c).is_err());
    }

    #[test]
    fn gate() {
        assert!(!threshold_gate(-3.0, Some(-1.0)));
        assert!(threshold_gate(0.0, Some(-1.0)));
        assert!(threshold_gate(-100.0, None));
    }

    #[test]
    fn quantile_interpolates() {
        let v: Vec<f64> = (0..11).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.9).unwrap(), 9.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5).unwrap(), 1.5);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(0.0);
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg(0.0);
        c.n_mc = 0;
        assert!(c.validate().is_err());
        cfg(0.5).validate().unwrap();
    }
}
