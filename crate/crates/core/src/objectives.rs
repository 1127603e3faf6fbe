//! Trajectory-balance and detailed-balance discrepancies and losses.
//!
//! Everything is computed additively in the log domain.

use crate::error::{ensure_finite, Error, Result};

/// A complete trajectory summarised by its accumulated log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord<P> {
    pub terminal: P,
    pub log_pf: f64,
    pub log_pb: f64,
    pub log_reward: f64,
    pub steps: Option<Vec<TransitionRecord>>,
}

/// One move `s -> s'` of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub state: usize,
    /// `None` when the move terminates at `state`.
    pub next_state: Option<usize>,
    pub log_pf_step: f64,
    pub log_pb_step: f64,
    /// Task log-reward of the terminal object when this move terminates.
    pub terminal_log_reward: Option<f64>,
}

impl TransitionRecord {
    pub fn is_terminal_step(&self) -> bool {
        self.next_state.is_none()
    }
}

impl<P> TrajectoryRecord<P> {
    pub fn validate(&self) -> Result<()> {
        ensure_finite("log_pf", self.log_pf)?;
        ensure_finite("log_pb", self.log_pb)?;
        ensure_finite("log_reward", self.log_reward)?;
        if let Some(steps) = &self.steps {
            let pf: f64 = steps.iter().map(|s| s.log_pf_step).sum();
            let pb: f64 = steps.iter().map(|s| s.log_pb_step).sum();
            if (pf - self.log_pf).abs() > 1e-10 || (pb - self.log_pb).abs() > 1e-10 {
                return Err(Error::InvalidTrajectory(format!(
                    "step log-probabilities sum to ({pf}, {pb}), record holds ({}, {})",
                    self.log_pf, self.log_pb
                )));
            }
        }
        Ok(())
    }
}

/// `δ = (log R + log P_B) - (log Z + log P_F)`.
#[inline]
pub fn tb_delta(log_reward: f64, log_pb: f64, log_z: f64, log_pf: f64) -> f64 {
    (log_reward + log_pb) - (log_z + log_pf)
}

pub fn tb_discrepancy<P>(rec: &TrajectoryRecord<P>, log_z: f64) -> Result<f64> {
    ensure_finite("TB discrepancy", tb_delta(rec.log_reward, rec.log_pb, log_z, rec.log_pf))
}

pub fn tb_loss<P>(rec: &TrajectoryRecord<P>, log_z: f64) -> Result<f64> {
    let d = tb_discrepancy(rec, log_z)?;
    Ok(d * d)
}

/// `δ_DB = (log F(s') + log P_B(s|s')) - (log F(s) + log P_F(s'|s))`, where a
/// terminating move uses the terminal log-reward in place of `log F(s')`.
pub fn db_discrepancy(tr: &TransitionRecord, log_f_s: f64, log_f_next: f64) -> Result<f64> {
    let next = match tr.terminal_log_reward {
        Some(r) if tr.is_terminal_step() => r,
        None if tr.is_terminal_step() => {
            return Err(Error::InvalidTrajectory("terminal transition without a log-reward".into()))
        }
        _ => log_f_next,
    };
    ensure_finite(
        "DB discrepancy",
        (next + tr.log_pb_step) - (log_f_s + tr.log_pf_step),
    )
}

pub fn db_loss(tr: &TransitionRecord, log_f_s: f64, log_f_next: f64) -> Result<f64> {
    let d = db_discrepancy(tr, log_f_s, log_f_next)?;
    Ok(d * d)
}
