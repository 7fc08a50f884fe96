//! Trajectory scoring: accuracy plus length-incentive plus redundancy
//! penalty, and the count-based bonus used by the bandit-style baseline.
//!
//! The length term pays nothing for correct answers and nothing for wrong
//! answers that are already at least `l_target = l_ref + delta_l` tokens
//! long; wrong answers shorter than the target lose `eta` per missing token.
//! The redundancy term is a hard-threshold indicator: it fires (value -1)
//! when within-trajectory n-gram visitation exceeds `theta`, strictly, and is
//! weighted by `beta` exactly once in the total.

use std::collections::HashMap;

use thiserror::Error;

use crate::trace::{self, AbstractState, TraceError, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("trajectory has no correctness label")]
    MissingLabel,
    #[error("count bonus queried for an unvisited state (n = 0)")]
    UnvisitedState,
    #[error("invalid reward config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Whether the redundancy indicator fires when any state count exceeds the
/// threshold, or only when every state count does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RedundancySemantics {
    Any,
    All,
}

impl std::fmt::Display for RedundancySemantics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RedundancySemantics::Any => write!(f, "any"),
            RedundancySemantics::All => write!(f, "all"),
        }
    }
}

impl std::str::FromStr for RedundancySemantics {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "any" => Ok(RedundancySemantics::Any),
            "all" => Ok(RedundancySemantics::All),
            other => Err(format!(
                "redundancy semantics must be 'any' or 'all', got '{other}'"
            )),
        }
    }
}

/// Knobs of the reward recipe. `eta` is the penalty slope per missing token;
/// callers working from a budget-relative config should set it as
/// `eta_max / length_scale`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RewardConfig {
    pub eta: f64,
    pub delta_l: usize,
    pub beta: f64,
    pub theta: usize,
    pub n: usize,
    pub redundancy_semantics: RedundancySemantics,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            eta: 0.3 / 9000.0,
            delta_l: 0,
            beta: 0.6,
            theta: 10,
            n: 10,
            redundancy_semantics: RedundancySemantics::Any,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.eta >= 0.0) {
            return Err(RewardError::BadConfig(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(RewardError::BadConfig(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if self.theta < 1 {
            return Err(RewardError::BadConfig("theta must be >= 1".into()));
        }
        if self.n < 1 {
            return Err(RewardError::BadConfig("n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-trajectory score decomposition. `red_term` is the unweighted indicator
/// in {0, -1}; `total = acc + len_term + beta * red_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub len_term: f64,
    pub red_term: f64,
    pub total: f64,
}

/// Sample-wise target length.
pub fn target_length(l_ref: usize, delta_l: usize) -> usize {
    l_ref + delta_l
}

/// Length-incentive term: 0 for correct answers and for wrong answers at or
/// past the target; `-eta * (l_target - l)` for wrong answers short of it.
pub fn length_reward(l: usize, l_target: usize, acc: bool, eta: f64) -> f64 {
    if acc || l >= l_target {
        0.0
    } else {
        -eta * (l_target - l) as f64
    }
}

/// Hard-threshold redundancy indicator over visitation counts; 0 or -1.
/// Counts fire only when strictly greater than `theta`. Empty counts never
/// fire.
pub fn redundancy_penalty(
    counts: &HashMap<AbstractState, usize>,
    theta: usize,
    semantics: RedundancySemantics,
) -> f64 {
    let fired = match semantics {
        RedundancySemantics::Any => counts.values().any(|&c| c > theta),
        RedundancySemantics::All => {
            !counts.is_empty() && counts.values().all(|&c| c > theta)
        }
    };
    if fired {
        -1.0
    } else {
        0.0
    }
}

/// Full recipe for one labeled trajectory. The trajectory body length plays
/// the role of L (truncated rollouts therefore score with L = budget), and
/// redundancy is computed from within-trajectory visitation counts at the
/// config's window length.
pub fn combined_reward(
    traj: &Trajectory,
    l_ref: usize,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    cfg.validate()?;
    let correct = traj.correct.ok_or(RewardError::MissingLabel)?;
    let acc = if correct { 1.0 } else { 0.0 };
    let len_term = length_reward(
        traj.len(),
        target_length(l_ref, cfg.delta_l),
        correct,
        cfg.eta,
    );
    let counts = trace::visitation_counts(traj, cfg.n)?;
    let red_term = redundancy_penalty(&counts, cfg.theta, cfg.redundancy_semantics);
    Ok(RewardBreakdown {
        acc,
        len_term,
        red_term,
        total: acc + len_term + cfg.beta * red_term,
    })
}

/// Count-based exploration bonus `beta_bonus / sqrt(n_sa)` for a visited
/// state-action; strictly decreasing in the visit count.
pub fn count_bonus(n_sa: usize, beta_bonus: f64) -> Result<f64, RewardError> {
    if n_sa == 0 {
        return Err(RewardError::UnvisitedState);
    }
    Ok(beta_bonus / (n_sa as f64).sqrt())
}
