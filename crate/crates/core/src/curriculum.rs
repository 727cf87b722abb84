//! Easy-to-hard batch scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::fisher::BatchScore;

/// Slack used when taking the ceiling, so that e.g. `0.7 · 10` counts as 7.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pace {
    Linear,
    Sqrt,
    Exp,
}

impl std::str::FromStr for Pace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Pace::Linear),
            "sqrt" => Ok(Pace::Sqrt),
            "exp" => Ok(Pace::Exp),
            other => Err(format!("unknown pace `{other}` (expected linear, sqrt or exp)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacingConfig {
    /// Share of batches used at round 0.
    pub beta: f64,
    /// Fraction of the run after which every batch is in play (linear pace).
    pub alpha: f64,
    pub pace: Pace,
    pub batch_size: usize,
    pub total_rounds: usize,
}

impl PacingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.beta > 0.0 && self.beta <= 1.0, Contract, "beta must lie in (0, 1], got {}", self.beta);
        ensure!(self.alpha > 0.0 && self.alpha <= 1.0, Contract, "alpha must lie in (0, 1], got {}", self.alpha);
        ensure!(self.batch_size >= 1, Contract, "batch size must be at least 1");
        ensure!(self.total_rounds >= 1, Contract, "total rounds must be at least 1");
        Ok(())
    }

    fn progress(&self, t: usize) -> f64 {
        let t = t as f64;
        let horizon = self.alpha * self.total_rounds as f64;
        match self.pace {
            Pace::Linear => t / horizon,
            Pace::Sqrt => t * t / horizon,
            Pace::Exp => t.exp() / horizon,
        }
    }
}

pub fn num_batches(n_k: usize, batch_size: usize) -> usize {
    n_k.div_ceil(batch_size)
}

/// Number of batches a device trains on at round `t`:
/// `ceil((β + (1−β)·progress(t)) · n_k/B)` clamped to `[1, ceil(n_k/B)]`.
pub fn pace_count(cfg: &PacingConfig, t: usize, n_k: usize) -> Result<usize> {
    cfg.validate()?;
    ensure!(n_k >= cfg.batch_size, Contract, "device has {n_k} samples, fewer than one batch of {}", cfg.batch_size);
    let ratio = cfg.beta + (1.0 - cfg.beta) * cfg.progress(t);
    let value = ratio * n_k as f64 / cfg.batch_size as f64;
    let total = num_batches(n_k, cfg.batch_size);
    if !value.is_finite() || value >= total as f64 {
        return Ok(total);
    }
    Ok(((value - CEIL_SLACK).ceil().max(1.0) as usize).min(total))
}

/// Batch ids ordered by ascending score, ties by ascending id.
pub fn sort_batches(scores: &[BatchScore]) -> Vec<usize> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.batch_id.cmp(&b.batch_id)));
    sorted.into_iter().map(|b| b.batch_id).collect()
}

/// The `count` easiest batches.
pub fn select_batches(order: &[usize], count: usize) -> Result<Vec<usize>> {
    ensure!(count <= order.len(), Contract, "cannot select {count} of {} batches", order.len());
    Ok(order[..count].to_vec())
}
