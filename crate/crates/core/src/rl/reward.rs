//! Per-round reward: `-w1 * mean CS + w2 * utilization`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-job CS is clipped here before averaging, which bounds the reward.
pub const CS_CAP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    w1: f64,
    w2: f64,
}

impl RewardWeights {
    /// Builds the pair `(w1, 1 - w1)`.
    pub fn new(w1: f64) -> Result<RewardWeights> {
        if !(0.0..=1.0).contains(&w1) {
            return Err(Error::Validation(format!("w1 = {w1} must lie in [0, 1]")));
        }
        Ok(RewardWeights { w1, w2: 1.0 - w1 })
    }

    /// Accepts an explicit pair only if it sums to one.
    pub fn from_pair(w1: f64, w2: f64) -> Result<RewardWeights> {
        let w = RewardWeights::new(w1)?;
        if (w1 + w2 - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "w1 + w2 = {} must equal 1",
                w1 + w2
            )));
        }
        Ok(w)
    }

    /// Named presets `A` through `E`.
    pub fn branch(name: &str) -> Option<RewardWeights> {
        let w1 = match name {
            "A" | "a" => 0.3,
            "B" | "b" => 0.4,
            "C" | "c" => 0.5,
            "D" | "d" => 0.6,
            "E" | "e" => 0.7,
            _ => return None,
        };
        RewardWeights::new(w1).ok()
    }

    pub const BRANCHES: [&'static str; 5] = ["A", "B", "C", "D", "E"];

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn w2(&self) -> f64 {
        self.w2
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { w1: 0.4, w2: 0.6 }
    }
}

pub fn reward_from_terms(mean_cs: f64, utilization: f64, weights: &RewardWeights) -> f64 {
    -weights.w1 * mean_cs + weights.w2 * utilization
}

/// Reward for a round given the CS of every running job. The CS term is 0
/// when nothing runs.
pub fn compute_reward(running_cs: &[f64], utilization: f64, weights: &RewardWeights) -> f64 {
    reward_from_terms(mean_clipped_cs(running_cs), utilization, weights)
}

pub fn mean_clipped_cs(running_cs: &[f64]) -> f64 {
    if running_cs.is_empty() {
        return 0.0;
    }
    running_cs.iter().map(|c| c.min(CS_CAP)).sum::<f64>() / running_cs.len() as f64
}
