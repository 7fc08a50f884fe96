//! UCB1 bandit baseline.
//!
//! A minimal stochastic-bandit setup with Bernoulli arms. Deliberate
//! optimism (the exploration bonus `sqrt(2 ln t / n_a)`) keeps per-arm
//! visitation from starving, so cumulative pseudo-regret grows
//! logarithmically. The training recipes in this workspace chase the same
//! effect with count-style bonuses; this module is the reference point where
//! the guarantee is exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream;
use rand::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum BanditError {
    #[error("need at least one arm")]
    NoArms,
    #[error("arm {index} has mean {mean}, expected a value in [0, 1]")]
    BadMean { index: usize, mean: f64 },
    #[error("arm index {index} out of range for {arms} arms")]
    ArmOutOfRange { index: usize, arms: usize },
    #[error("pull sequence references arm {index} but only {arms} arms exist")]
    UnknownArm { index: usize, arms: usize },
}

/// A Bernoulli arm with success probability `mean`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub mean: f64,
}

impl ArmSpec {
    pub fn new(mean: f64) -> Self {
        ArmSpec { mean }
    }
}

fn validate_arms(arms: &[ArmSpec]) -> Result<(), BanditError> {
    if arms.is_empty() {
        return Err(BanditError::NoArms);
    }
    for (index, arm) in arms.iter().enumerate() {
        if !(arm.mean >= 0.0 && arm.mean <= 1.0) {
            return Err(BanditError::BadMean {
                index,
                mean: arm.mean,
            });
        }
    }
    Ok(())
}

/// Pull counts and reward sums; everything the index needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub t: u64,
    pub counts: Vec<u64>,
    pub reward_sums: Vec<f64>,
}

impl BanditState {
    pub fn new(arms: usize) -> Self {
        BanditState {
            t: 0,
            counts: vec![0; arms],
            reward_sums: vec![0.0; arms],
        }
    }

    pub fn arms(&self) -> usize {
        self.counts.len()
    }
}

/// UCB1 choice: any untried arm first (lowest index), otherwise the arm
/// maximizing `mean_estimate + sqrt(2 ln t / n_a)`, ties to the lowest index.
pub fn select_arm(state: &BanditState) -> Result<usize, BanditError> {
    if state.counts.is_empty() {
        return Err(BanditError::NoArms);
    }
    if let Some(untried) = state.counts.iter().position(|&n| n == 0) {
        return Ok(untried);
    }
    let ln_t = (state.t as f64).ln();
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for a in 0..state.arms() {
        let n = state.counts[a] as f64;
        let score = state.reward_sums[a] / n + (2.0 * ln_t / n).sqrt();
        if score > best_score {
            best_score = score;
            best = a;
        }
    }
    Ok(best)
}

/// Records one observed pull.
pub fn update(state: &mut BanditState, arm: usize, reward: f64) -> Result<(), BanditError> {
    if arm >= state.arms() {
        return Err(BanditError::ArmOutOfRange {
            index: arm,
            arms: state.arms(),
        });
    }
    state.t += 1;
    state.counts[arm] += 1;
    state.reward_sums[arm] += reward;
    Ok(())
}

/// Cumulative pseudo-regret after each pull: `t * best_mean - sum of pulled
/// means`, using the true arm means rather than sampled rewards.
pub fn cumulative_regret(pulls: &[usize], arms: &[ArmSpec]) -> Result<Vec<f64>, BanditError> {
    validate_arms(arms)?;
    let best = arms.iter().map(|a| a.mean).fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(pulls.len());
    let mut acc = 0.0;
    for &p in pulls {
        if p >= arms.len() {
            return Err(BanditError::UnknownArm {
                index: p,
                arms: arms.len(),
            });
        }
        acc += best - arms[p].mean;
        out.push(acc);
    }
    Ok(out)
}

/// Pseudo-regret sampled at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub t: u64,
    pub regret: f64,
}

/// Outcome of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditRun {
    pub checkpoints: Vec<RegretPoint>,
    pub final_regret: f64,
    pub state: BanditState,
}

/// Log-spaced sample times `{1,2,3,5,7} * 10^e` up to and including
/// `horizon`.
pub fn checkpoint_times(horizon: u64) -> Vec<u64> {
    let mut times = Vec::new();
    let mut decade = 1u64;
    loop {
        for m in [1u64, 2, 3, 5, 7] {
            let t = match m.checked_mul(decade) {
                Some(t) if t <= horizon => t,
                _ => continue,
            };
            times.push(t);
        }
        match decade.checked_mul(10) {
            Some(next) if next <= horizon => decade = next,
            _ => break,
        }
    }
    times.push(horizon);
    times.sort_unstable();
    times.dedup();
    times
}

/// Runs UCB1 against Bernoulli arms for `horizon` pulls. Deterministic in
/// `(arms, horizon, seed)`.
pub fn simulate(arms: &[ArmSpec], horizon: u64, seed: u64) -> Result<BanditRun, BanditError> {
    validate_arms(arms)?;
    let best = arms.iter().map(|a| a.mean).fold(f64::NEG_INFINITY, f64::max);
    let mut rng = stream::derive_rng(seed, &[stream::tag::BANDIT]);
    let mut state = BanditState::new(arms.len());
    let times = checkpoint_times(horizon);
    let mut checkpoints = Vec::with_capacity(times.len());
    let mut next_checkpoint = 0usize;
    let mut regret = 0.0;
    for step in 1..=horizon {
        let arm = select_arm(&state)?;
        let reward = f64::from(rng.random::<f64>() < arms[arm].mean);
        update(&mut state, arm, reward)?;
        regret += best - arms[arm].mean;
        if next_checkpoint < times.len() && times[next_checkpoint] == step {
            checkpoints.push(RegretPoint {
                t: step,
                regret,
            });
            next_checkpoint += 1;
        }
    }
    Ok(BanditRun {
        checkpoints,
        final_regret: regret,
        state,
    })
}
