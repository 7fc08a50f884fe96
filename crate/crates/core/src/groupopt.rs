//! Group-relative advantages and clipped surrogate objectives.
//!
//! A rollout group holds G trajectories sampled for one prompt. Rewards are
//! normalized within the group (mean 0, population std 1; all zeros when the
//! group is degenerate), then fed to either the token-ratio objective (GRPO)
//! or the length-normalized sequence-ratio objective (GSPO). For on-policy
//! batches with a single update per rollout, both reduce to
//! advantage-weighted log-likelihood ascent with per-action weight `A_i/T_i`,
//! which `reinforce_update` applies using the exact tabular-softmax gradient.
//!
//! Log-prob sequences cover every sampled action: each body token plus, for
//! terminated trajectories, the final EOS draw. Scoring the EOS draw matters;
//! leaving it out makes an immediate-EOS policy collapse invisible to the
//! gradient, because the trajectories it produces carry no scored actions.

use thiserror::Error;

use crate::policy::{ContextId, MarkovPolicy, PolicyError};
use crate::trace::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum GroupError {
    #[error("group needs at least 2 rollouts, got {got}")]
    GroupTooSmall { got: usize },
    #[error("{what} length {got} does not match expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("trajectory {index} has no scored actions")]
    EmptyTrajectory { index: usize },
    #[error("non-finite log-probability at trajectory {index}")]
    NonFinite { index: usize },
    #[error("positive log-probability {value} at trajectory {index}")]
    PositiveLogProb { index: usize, value: f64 },
    #[error(
        "stale rollout: stored logp differs from current policy by {delta:.3e} \
         at trajectory {index}, action {step}"
    )]
    StalePolicy {
        index: usize,
        step: usize,
        delta: f64,
    },
    #[error("clip range must satisfy 0 < low < 1 and high > 0, got ({low}, {high})")]
    BadClipRange { low: f64, high: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Asymmetric PPO-style clip interval `[1 - low, 1 + high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRange {
    pub low: f64,
    pub high: f64,
}

impl ClipRange {
    pub fn new(low: f64, high: f64) -> Result<Self, GroupError> {
        if !(low > 0.0 && low < 1.0 && high > 0.0) {
            return Err(GroupError::BadClipRange { low, high });
        }
        Ok(ClipRange { low, high })
    }

    pub fn symmetric(eps: f64) -> Result<Self, GroupError> {
        Self::new(eps, eps)
    }

    fn clamp(&self, ratio: f64) -> f64 {
        ratio.clamp(1.0 - self.low, 1.0 + self.high)
    }
}

/// Which surrogate shape to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Grpo,
    Gspo,
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algo::Grpo => write!(f, "grpo"),
            Algo::Gspo => write!(f, "gspo"),
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grpo" => Ok(Algo::Grpo),
            "gspo" => Ok(Algo::Gspo),
            other => Err(format!("algo must be 'grpo' or 'gspo', got '{other}'")),
        }
    }
}

/// G trajectories for one prompt with their rewards and per-action log-probs
/// under the current (`logp_new`) and sampling (`logp_old`) policies.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub logp_new: Vec<Vec<f64>>,
    pub logp_old: Vec<Vec<f64>>,
}

/// Scored actions of a trajectory: body length plus the terminal EOS draw.
pub fn action_len(traj: &Trajectory) -> usize {
    traj.len() + usize::from(traj.terminated)
}

impl RolloutGroup {
    pub fn new(
        prompt_id: impl Into<String>,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
        logp_new: Vec<Vec<f64>>,
        logp_old: Vec<Vec<f64>>,
    ) -> Result<Self, GroupError> {
        let g = trajectories.len();
        if g < 2 {
            return Err(GroupError::GroupTooSmall { got: g });
        }
        for (what, len) in [
            ("rewards", rewards.len()),
            ("logp_new", logp_new.len()),
            ("logp_old", logp_old.len()),
        ] {
            if len != g {
                return Err(GroupError::LengthMismatch {
                    what,
                    got: len,
                    expected: g,
                });
            }
        }
        for (i, traj) in trajectories.iter().enumerate() {
            let expected = action_len(traj);
            for (what, seq) in [("logp_new", &logp_new[i]), ("logp_old", &logp_old[i])] {
                if seq.len() != expected {
                    return Err(GroupError::LengthMismatch {
                        what,
                        got: seq.len(),
                        expected,
                    });
                }
                for &lp in seq {
                    if !lp.is_finite() {
                        return Err(GroupError::NonFinite { index: i });
                    }
                    if lp > 0.0 {
                        return Err(GroupError::PositiveLogProb { index: i, value: lp });
                    }
                }
            }
        }
        Ok(RolloutGroup {
            prompt_id: prompt_id.into(),
            trajectories,
            rewards,
            logp_new,
            logp_old,
        })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }
}

/// Group-normalized advantages, one per rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
}

/// `(R_i - mean) / std` with population std; a zero-variance group gets all
/// zeros and contributes no gradient.
pub fn group_advantages(rewards: &[f64]) -> Result<AdvantageVector, GroupError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GroupError::GroupTooSmall { got: g });
    }
    // All-equal groups are degenerate by definition. Checked before any
    // arithmetic: the accumulated mean of g copies of r can land one ulp
    // away from r, and normalizing that phantom variance would blow the
    // rounding noise up to full-size advantages.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(AdvantageVector {
            values: vec![0.0; g],
        });
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    let values = if std == 0.0 {
        vec![0.0; g]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageVector { values })
}

/// Per-token importance ratio `exp(logp_new - logp_old)`.
pub fn token_ratio(logp_new_t: f64, logp_old_t: f64) -> Result<f64, GroupError> {
    if !logp_new_t.is_finite() || !logp_old_t.is_finite() {
        return Err(GroupError::NonFinite { index: 0 });
    }
    Ok((logp_new_t - logp_old_t).exp())
}

/// Length-normalized sequence ratio `exp((sum new - sum old) / L)`, the
/// geometric mean of the per-token ratios.
pub fn sequence_ratio(logp_new: &[f64], logp_old: &[f64]) -> Result<f64, GroupError> {
    if logp_new.len() != logp_old.len() {
        return Err(GroupError::LengthMismatch {
            what: "logp_old",
            got: logp_old.len(),
            expected: logp_new.len(),
        });
    }
    if logp_new.is_empty() {
        return Err(GroupError::EmptyTrajectory { index: 0 });
    }
    if logp_new.iter().chain(logp_old).any(|lp| !lp.is_finite()) {
        return Err(GroupError::NonFinite { index: 0 });
    }
    let diff: f64 = logp_new.iter().sum::<f64>() - logp_old.iter().sum::<f64>();
    Ok((diff / logp_new.len() as f64).exp())
}

/// Evaluation summary of a clipped surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateStats {
    pub objective: f64,
    /// Fraction of terms (tokens for GRPO, sequences for GSPO) where the
    /// clipped branch was strictly smaller.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

fn clipped_term(ratio: f64, adv: f64, clip: ClipRange) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = clip.clamp(ratio) * adv;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

fn check_group_for_objective(
    group: &RolloutGroup,
    adv: &AdvantageVector,
) -> Result<(), GroupError> {
    if adv.values.len() != group.size() {
        return Err(GroupError::LengthMismatch {
            what: "advantages",
            got: adv.values.len(),
            expected: group.size(),
        });
    }
    for (i, seq) in group.logp_new.iter().enumerate() {
        if seq.is_empty() {
            return Err(GroupError::EmptyTrajectory { index: i });
        }
    }
    Ok(())
}

/// Token-level clipped surrogate: mean over rollouts of the per-token mean of
/// `min(ratio * A, clip(ratio) * A)`.
pub fn grpo_objective(
    group: &RolloutGroup,
    adv: &AdvantageVector,
    eps_clip: ClipRange,
) -> Result<SurrogateStats, GroupError> {
    check_group_for_objective(group, adv)?;
    let g = group.size();
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    let mut ratio_sum = 0.0;
    for i in 0..g {
        let a = adv.values[i];
        let mut traj_sum = 0.0;
        for (&lp_new, &lp_old) in group.logp_new[i].iter().zip(&group.logp_old[i]) {
            let ratio = token_ratio(lp_new, lp_old)?;
            let (term, was_clipped) = clipped_term(ratio, a, eps_clip);
            traj_sum += term;
            clipped += usize::from(was_clipped);
            tokens += 1;
            ratio_sum += ratio;
        }
        objective += traj_sum / group.logp_new[i].len() as f64;
    }
    Ok(SurrogateStats {
        objective: objective / g as f64,
        clip_fraction: clipped as f64 / tokens as f64,
        mean_ratio: ratio_sum / tokens as f64,
    })
}

/// Sequence-level clipped surrogate: one term per rollout using the
/// length-normalized ratio.
pub fn gspo_objective(
    group: &RolloutGroup,
    adv: &AdvantageVector,
    eps_clip: ClipRange,
) -> Result<SurrogateStats, GroupError> {
    check_group_for_objective(group, adv)?;
    let g = group.size();
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut ratio_sum = 0.0;
    for i in 0..g {
        let ratio = sequence_ratio(&group.logp_new[i], &group.logp_old[i])?;
        let (term, was_clipped) = clipped_term(ratio, adv.values[i], eps_clip);
        objective += term;
        clipped += usize::from(was_clipped);
        ratio_sum += ratio;
    }
    Ok(SurrogateStats {
        objective: objective / g as f64,
        clip_fraction: clipped as f64 / g as f64,
        mean_ratio: ratio_sum / g as f64,
    })
}

/// Scored action sequence of a trajectory under `policy`: the contexts
/// walked from `start` and the action taken at each (body tokens, then EOS
/// for terminated rollouts).
fn action_steps(
    policy: &MarkovPolicy,
    start: ContextId,
    traj: &Trajectory,
) -> Result<Vec<(ContextId, usize)>, GroupError> {
    let walk = policy.context_walk(start, &traj.tokens)?;
    let mut steps: Vec<(ContextId, usize)> = traj
        .tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| (walk[t], tok as usize))
        .collect();
    if traj.terminated {
        steps.push((walk[traj.len()], policy.eos_action()));
    }
    Ok(steps)
}

/// Accumulates the exact gradient of the chosen surrogate for one group into
/// `grad` (same layout as the policy's logit table), scaled by `scale`.
/// `logp_new` is recomputed from `policy`; `logp_old` comes from the group.
fn accumulate_surrogate_gradient(
    policy: &MarkovPolicy,
    group: &RolloutGroup,
    adv: &AdvantageVector,
    start: ContextId,
    eps_clip: ClipRange,
    algo: Algo,
    scale: f64,
    grad: &mut [f64],
) -> Result<(), GroupError> {
    check_group_for_objective(group, adv)?;
    let g = group.size() as f64;
    let actions = policy.action_count();
    for (i, traj) in group.trajectories.iter().enumerate() {
        let steps = action_steps(policy, start, traj)?;
        if steps.len() != group.logp_old[i].len() {
            return Err(GroupError::LengthMismatch {
                what: "logp_old",
                got: group.logp_old[i].len(),
                expected: steps.len(),
            });
        }
        let a = adv.values[i];
        let t_count = steps.len() as f64;
        let logps_new: Vec<f64> = steps
            .iter()
            .map(|&(ctx, act)| policy.log_prob(ctx, act))
            .collect();
        // Per-step weight on grad(logp): A * ratio / (G * T) when the
        // unclipped branch is active, else 0. For GSPO the gate and ratio are
        // sequence-level; the 1/T comes from the ratio's 1/L exponent.
        let weights: Vec<f64> = match algo {
            Algo::Grpo => logps_new
                .iter()
                .zip(&group.logp_old[i])
                .map(|(&lp_new, &lp_old)| {
                    let ratio = (lp_new - lp_old).exp();
                    let (_, was_clipped) = clipped_term(ratio, a, eps_clip);
                    if was_clipped {
                        0.0
                    } else {
                        a * ratio / (g * t_count)
                    }
                })
                .collect(),
            Algo::Gspo => {
                let ratio = sequence_ratio(&logps_new, &group.logp_old[i])?;
                let (_, was_clipped) = clipped_term(ratio, a, eps_clip);
                let w = if was_clipped {
                    0.0
                } else {
                    a * ratio / (g * t_count)
                };
                vec![w; steps.len()]
            }
        };
        for (&(ctx, act), w) in steps.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let row = ctx.0 * actions;
            let lp_row = policy.log_probs(ctx);
            for (b, &lp) in lp_row.iter().enumerate() {
                grad[row + b] -= scale * w * lp.exp();
            }
            grad[row + act] += scale * w;
        }
    }
    Ok(())
}

/// Exact gradient of the chosen surrogate objective with respect to the
/// policy logits, for one group. Useful on its own for oracle checks.
pub fn surrogate_gradient(
    policy: &MarkovPolicy,
    group: &RolloutGroup,
    adv: &AdvantageVector,
    start: ContextId,
    eps_clip: ClipRange,
    algo: Algo,
) -> Result<Vec<f64>, GroupError> {
    let mut grad = vec![0.0; policy.logits().len()];
    accumulate_surrogate_gradient(policy, group, adv, start, eps_clip, algo, 1.0, &mut grad)?;
    Ok(grad)
}

const STALE_TOLERANCE: f64 = 1e-6;
// Inert at ratio 1; only there so the shared gradient path has a clip range.
const ON_POLICY_CLIP: ClipRange = ClipRange {
    low: 0.2,
    high: 0.2,
};

/// One on-policy ascent step: verifies each stored `logp_old` still matches
/// the policy (within 1e-6), then applies the mean surrogate gradient over
/// the batch, scaled by `lr`. At ratio 1 both algorithms reduce to per-action
/// weight `A_i / T_i`.
pub fn reinforce_update(
    policy: &mut MarkovPolicy,
    groups: &[RolloutGroup],
    advs: &[AdvantageVector],
    starts: &[ContextId],
    lr: f64,
    algo: Algo,
) -> Result<(), GroupError> {
    check_batch(groups, advs, starts)?;
    for (g, (group, &start)) in groups.iter().zip(starts).enumerate() {
        for (i, traj) in group.trajectories.iter().enumerate() {
            let steps = action_steps(policy, start, traj)?;
            for (t, &(ctx, act)) in steps.iter().enumerate() {
                let delta = (policy.log_prob(ctx, act) - group.logp_old[i][t]).abs();
                if delta > STALE_TOLERANCE {
                    let _ = g;
                    return Err(GroupError::StalePolicy {
                        index: i,
                        step: t,
                        delta,
                    });
                }
            }
        }
    }
    apply_mean_gradient(policy, groups, advs, starts, lr, ON_POLICY_CLIP, algo)
}

/// One off-policy ascent step with clipping active; used for the optional
/// multi-update-per-rollout mode where ratios drift from 1.
pub fn surrogate_step(
    policy: &mut MarkovPolicy,
    groups: &[RolloutGroup],
    advs: &[AdvantageVector],
    starts: &[ContextId],
    lr: f64,
    eps_clip: ClipRange,
    algo: Algo,
) -> Result<(), GroupError> {
    check_batch(groups, advs, starts)?;
    apply_mean_gradient(policy, groups, advs, starts, lr, eps_clip, algo)
}

fn check_batch(
    groups: &[RolloutGroup],
    advs: &[AdvantageVector],
    starts: &[ContextId],
) -> Result<(), GroupError> {
    if advs.len() != groups.len() {
        return Err(GroupError::LengthMismatch {
            what: "advantages",
            got: advs.len(),
            expected: groups.len(),
        });
    }
    if starts.len() != groups.len() {
        return Err(GroupError::LengthMismatch {
            what: "starts",
            got: starts.len(),
            expected: groups.len(),
        });
    }
    Ok(())
}

fn apply_mean_gradient(
    policy: &mut MarkovPolicy,
    groups: &[RolloutGroup],
    advs: &[AdvantageVector],
    starts: &[ContextId],
    lr: f64,
    eps_clip: ClipRange,
    algo: Algo,
) -> Result<(), GroupError> {
    let mut grad = vec![0.0; policy.logits().len()];
    let scale = 1.0 / groups.len() as f64;
    for ((group, adv), &start) in groups.iter().zip(advs).zip(starts) {
        accumulate_surrogate_gradient(policy, group, adv, start, eps_clip, algo, scale, &mut grad)?;
    }
    for (logit, g) in policy.logits_mut().iter_mut().zip(&grad) {
        *logit += lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream;
    use crate::trace::VocabSpec;
    use rand::Rng;

    const TOL: f64 = 1e-12;

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.values, vec![1.0, -1.0, -1.0, 1.0]);
        let a = group_advantages(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(a.values, vec![0.0; 4]);
        // Equal rewards whose accumulated mean rounds one ulp away from
        // the common value must still be treated as degenerate.
        let a = group_advantages(&[0.7; 8]).unwrap();
        assert_eq!(a.values, vec![0.0; 8]);
        let a = group_advantages(&[2.0, 0.0]).unwrap();
        assert_eq!(a.values, vec![1.0, -1.0]);
        assert_eq!(
            group_advantages(&[1.0]),
            Err(GroupError::GroupTooSmall { got: 1 })
        );
    }

    #[test]
    fn advantages_are_translation_and_scale_invariant() {
        let base = [0.3, -1.2, 4.0, 0.0, 2.2];
        let a0 = group_advantages(&base).unwrap();
        let shifted: Vec<f64> = base.iter().map(|r| r + 17.5).collect();
        let scaled: Vec<f64> = base.iter().map(|r| r * 3.0).collect();
        for (x, y) in a0
            .values
            .iter()
            .zip(group_advantages(&shifted).unwrap().values)
        {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a0
            .values
            .iter()
            .zip(group_advantages(&scaled).unwrap().values)
        {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn advantage_moments_fuzz() {
        let mut rng = stream::derive_rng(5, &[0xadd]);
        for _ in 0..500 {
            let g = rng.random_range(2..12);
            let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-3.0..3.0)).collect();
            let adv = group_advantages(&rewards).unwrap();
            let mean = adv.values.iter().sum::<f64>() / g as f64;
            let std =
                (adv.values.iter().map(|v| v * v).sum::<f64>() / g as f64).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ratio_examples() {
        assert!((token_ratio(-1.0, -1.0).unwrap() - 1.0).abs() < TOL);
        assert!((token_ratio(-1.0, -2.0).unwrap() - 1.0f64.exp()).abs() < TOL);
        assert!((token_ratio(-3.0, -1.0).unwrap() - (-2.0f64).exp()).abs() < TOL);
        assert!(token_ratio(f64::NAN, -1.0).is_err());
        assert!(token_ratio(-1.0, f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn sequence_ratio_examples() {
        let x = vec![-0.5, -1.5, -0.25, -0.75];
        assert_eq!(sequence_ratio(&x, &x).unwrap(), 1.0);

        // L = 4, every token's log-ratio is ln 2: ratio 2.
        let old: Vec<f64> = x.iter().map(|v| v - 2.0f64.ln()).collect();
        assert!((sequence_ratio(&x, &old).unwrap() - 2.0).abs() < TOL);

        // L = 2, per-token diffs ln 9 and ln 1: geometric mean 3.
        let old = vec![-3.0, -1.0];
        let new = vec![-3.0 + 9.0f64.ln(), -1.0];
        assert!((sequence_ratio(&new, &old).unwrap() - 3.0).abs() < 1e-12);

        assert_eq!(
            sequence_ratio(&[], &[]),
            Err(GroupError::EmptyTrajectory { index: 0 })
        );
        assert!(matches!(
            sequence_ratio(&[-1.0], &[-1.0, -2.0]),
            Err(GroupError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sequence_ratio_is_length_invariant() {
        let old = vec![-1.0, -2.0];
        let new = vec![-0.5, -1.5];
        let r1 = sequence_ratio(&new, &old).unwrap();
        let doubled_old: Vec<f64> = old.iter().chain(&old).copied().collect();
        let doubled_new: Vec<f64> = new.iter().chain(&new).copied().collect();
        let r2 = sequence_ratio(&doubled_new, &doubled_old).unwrap();
        assert!((r1 - r2).abs() < TOL);
    }

    fn one_token_group(ratios: &[f64]) -> RolloutGroup {
        let trajectories: Vec<Trajectory> = ratios
            .iter()
            .map(|_| Trajectory::new("p", vec![0], false))
            .collect();
        let logp_old: Vec<Vec<f64>> = ratios.iter().map(|_| vec![-2.0]).collect();
        let logp_new: Vec<Vec<f64>> = ratios.iter().map(|r| vec![-2.0 + r.ln()]).collect();
        RolloutGroup::new(
            "p",
            trajectories,
            vec![0.0; ratios.len()],
            logp_new,
            logp_old,
        )
        .unwrap()
    }

    #[test]
    fn grpo_identity_policy_gives_mean_advantage() {
        let group = one_token_group(&[1.0, 1.0, 1.0]);
        let adv = AdvantageVector {
            values: vec![1.0, -0.5, -0.5],
        };
        let stats = grpo_objective(&group, &adv, ClipRange::symmetric(0.2).unwrap()).unwrap();
        assert!(stats.objective.abs() < TOL);
        assert_eq!(stats.clip_fraction, 0.0);
        assert!((stats.mean_ratio - 1.0).abs() < TOL);
    }

    #[test]
    fn grpo_clip_arithmetic_positive_advantage() {
        // ratio 2 with A = 1 clips at 1.2; the companion term is inert.
        let group = one_token_group(&[2.0, 1.0]);
        let adv = AdvantageVector {
            values: vec![1.0, 0.0],
        };
        let stats = grpo_objective(&group, &adv, ClipRange::symmetric(0.2).unwrap()).unwrap();
        assert!((stats.objective - 0.6).abs() < TOL);
        assert!((stats.clip_fraction - 0.5).abs() < TOL);
    }

    #[test]
    fn grpo_clip_arithmetic_negative_advantage() {
        // ratio 0.5 with A = -1: min(-0.5, -0.8) = -0.8, clipped.
        let group = one_token_group(&[0.5, 1.0]);
        let adv = AdvantageVector {
            values: vec![-1.0, 0.0],
        };
        let stats = grpo_objective(&group, &adv, ClipRange::symmetric(0.2).unwrap()).unwrap();
        assert!((stats.objective - (-0.4)).abs() < TOL);
        assert!((stats.clip_fraction - 0.5).abs() < TOL);
    }

    #[test]
    fn gspo_identity_and_clip_examples() {
        let group = one_token_group(&[1.0, 1.0]);
        let adv = AdvantageVector {
            values: vec![1.0, -1.0],
        };
        let stats = gspo_objective(&group, &adv, ClipRange::symmetric(0.2).unwrap()).unwrap();
        assert!(stats.objective.abs() < TOL);

        let group = one_token_group(&[1.5, 1.0]);
        let stats = gspo_objective(&group, &adv, ClipRange::symmetric(0.2).unwrap()).unwrap();
        assert!((stats.objective - 0.1).abs() < TOL);
        assert!((stats.clip_fraction - 0.5).abs() < TOL);
    }

    #[test]
    fn clip_soundness_bounds() {
        let mut rng = stream::derive_rng(21, &[0xc1b]);
        let clip = ClipRange::new(0.2, 0.28).unwrap();
        for _ in 0..2000 {
            let ratio = rng.random_range(0.01..5.0);
            let adv = rng.random_range(-2.0..2.0);
            let (term, _) = clipped_term(ratio, adv, clip);
            // Pessimistic bound: never exceeds the unclipped term, and for
            // positive advantages the payoff for drifting up is capped.
            assert!(term <= ratio * adv + TOL);
            if adv > 0.0 {
                assert!(term <= (1.0 + clip.high) * adv + TOL);
            }
        }
    }

    #[test]
    fn empty_trajectory_rejected_by_objectives() {
        let trajectories = vec![
            Trajectory::new("p", vec![], false),
            Trajectory::new("p", vec![0], false),
        ];
        let group = RolloutGroup::new(
            "p",
            trajectories,
            vec![0.0, 0.0],
            vec![vec![], vec![-1.0]],
            vec![vec![], vec![-1.0]],
        )
        .unwrap();
        let adv = AdvantageVector {
            values: vec![0.0, 0.0],
        };
        let clip = ClipRange::symmetric(0.2).unwrap();
        assert_eq!(
            grpo_objective(&group, &adv, clip),
            Err(GroupError::EmptyTrajectory { index: 0 })
        );
        assert_eq!(
            gspo_objective(&group, &adv, clip),
            Err(GroupError::EmptyTrajectory { index: 0 })
        );
    }

    #[test]
    fn group_constructor_validates_shapes() {
        let t = Trajectory::new("p", vec![1, 2], true); // 3 actions with EOS
        let err = RolloutGroup::new(
            "p",
            vec![t.clone(), t.clone()],
            vec![0.0, 0.0],
            vec![vec![-1.0, -1.0], vec![-1.0, -1.0, -1.0]],
            vec![vec![-1.0, -1.0, -1.0], vec![-1.0, -1.0, -1.0]],
        )
        .unwrap_err();
        assert!(matches!(err, GroupError::LengthMismatch { .. }));

        let err = RolloutGroup::new(
            "p",
            vec![t.clone(), t],
            vec![0.0, 0.0],
            vec![vec![-1.0, -1.0, 0.5], vec![-1.0, -1.0, -1.0]],
            vec![vec![-1.0, -1.0, -1.0], vec![-1.0, -1.0, -1.0]],
        )
        .unwrap_err();
        assert!(matches!(err, GroupError::PositiveLogProb { .. }));
    }

    /// Builds an on-policy group by sampling short bodies from `policy`.
    fn sampled_group(
        policy: &MarkovPolicy,
        start: ContextId,
        g: usize,
        seed: u64,
    ) -> RolloutGroup {
        let mut rng = stream::derive_rng(seed, &[0x9a3]);
        let mut trajectories = Vec::new();
        let mut logps = Vec::new();
        for _ in 0..g {
            let mut ctx = start;
            let mut tokens = Vec::new();
            let mut lps = Vec::new();
            let mut terminated = false;
            for _ in 0..rng.random_range(1..6usize) {
                let a = policy.sample_action(ctx, &mut rng);
                lps.push(policy.log_prob(ctx, a));
                if a == policy.eos_action() {
                    terminated = true;
                    break;
                }
                tokens.push(a as u32);
                ctx = policy.advance(ctx, a as u32).unwrap();
            }
            // Zero-action rollouts would be rejected by the objectives; the
            // loop above always scores at least one draw.
            trajectories.push(Trajectory::new("p", tokens, terminated));
            logps.push(lps);
        }
        RolloutGroup::new("p", trajectories, vec![0.0; g], logps.clone(), logps).unwrap()
    }

    #[test]
    fn reinforce_zero_advantage_leaves_policy_unchanged() {
        let vocab = VocabSpec::new(3);
        let mut policy = MarkovPolicy::seeded(vocab, 1, 11, 0.3, 0.0).unwrap();
        let before = policy.logits().to_vec();
        let start = policy.bos_context();
        let group = sampled_group(&policy, start, 4, 1);
        let adv = AdvantageVector {
            values: vec![0.0; 4],
        };
        reinforce_update(&mut policy, &[group], &[adv], &[start], 0.5, Algo::Grpo).unwrap();
        assert_eq!(policy.logits(), &before[..]);
    }

    #[test]
    fn reinforce_positive_advantage_raises_taken_action_probs() {
        let vocab = VocabSpec::new(3);
        for algo in [Algo::Grpo, Algo::Gspo] {
            let mut policy = MarkovPolicy::seeded(vocab, 1, 13, 0.3, 0.0).unwrap();
            let start = policy.bos_context();
            let group = sampled_group(&policy, start, 2, 7);
            let steps = action_steps(&policy, start, &group.trajectories[0]).unwrap();
            let before: Vec<f64> = steps
                .iter()
                .map(|&(ctx, a)| policy.log_prob(ctx, a))
                .collect();
            let adv = AdvantageVector {
                values: vec![1.0, 0.0],
            };
            reinforce_update(&mut policy, &[group], &[adv], &[start], 0.1, algo).unwrap();
            for (&(ctx, a), &lp_before) in steps.iter().zip(&before) {
                assert!(
                    policy.log_prob(ctx, a) > lp_before,
                    "{algo}: action prob did not increase"
                );
            }
        }
    }

    #[test]
    fn reinforce_rejects_stale_groups() {
        let vocab = VocabSpec::new(3);
        let mut policy = MarkovPolicy::seeded(vocab, 1, 17, 0.3, 0.0).unwrap();
        let start = policy.bos_context();
        let group = sampled_group(&policy, start, 3, 3);
        let adv = AdvantageVector {
            values: vec![1.0, -1.0, 0.0],
        };
        // Drift the policy in a row every trajectory visits (the start
        // context) so stored logp_old no longer matches.
        let drift_at = start.0 * policy.action_count();
        policy.logits_mut()[drift_at] += 0.01;
        let err = reinforce_update(&mut policy, &[group], &[adv], &[start], 0.1, Algo::Grpo);
        assert!(matches!(err, Err(GroupError::StalePolicy { .. })));
    }

    /// Central finite differences of the surrogate objective with respect to
    /// every logit, recomputing logp_new under the perturbed table.
    fn fd_gradient(
        policy: &MarkovPolicy,
        group: &RolloutGroup,
        adv: &AdvantageVector,
        start: ContextId,
        clip: ClipRange,
        algo: Algo,
        h: f64,
    ) -> Vec<f64> {
        let objective = |p: &MarkovPolicy| -> f64 {
            let mut refreshed = group.clone();
            for (i, traj) in group.trajectories.iter().enumerate() {
                let steps = action_steps(p, start, traj).unwrap();
                refreshed.logp_new[i] = steps
                    .iter()
                    .map(|&(ctx, a)| p.log_prob(ctx, a))
                    .collect();
            }
            let stats = match algo {
                Algo::Grpo => grpo_objective(&refreshed, adv, clip).unwrap(),
                Algo::Gspo => gspo_objective(&refreshed, adv, clip).unwrap(),
            };
            stats.objective
        };
        (0..policy.logits().len())
            .map(|j| {
                let mut plus = policy.clone();
                plus.logits_mut()[j] += h;
                let mut minus = policy.clone();
                minus.logits_mut()[j] -= h;
                (objective(&plus) - objective(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 3-token vocab, order-1 policy, G = 4, mixed on/off-policy ratios.
        let vocab = VocabSpec::new(3);
        let sampling = MarkovPolicy::seeded(vocab, 1, 29, 0.4, 0.0).unwrap();
        let start = sampling.bos_context();
        let group = sampled_group(&sampling, start, 4, 41);
        let adv = AdvantageVector {
            values: vec![1.0, -1.0, 0.5, -0.5],
        };
        let mut current = sampling.clone();
        let mut rng = stream::derive_rng(31, &[0xfd]);
        for l in current.logits_mut() {
            *l += rng.random_range(-0.2..0.2);
        }
        let clip = ClipRange::symmetric(0.2).unwrap();
        for algo in [Algo::Grpo, Algo::Gspo] {
            let analytic = surrogate_gradient(&current, &group, &adv, start, clip, algo).unwrap();
            let numeric = fd_gradient(&current, &group, &adv, start, clip, algo, 1e-4);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(
                    (a - n).abs() < 1e-5,
                    "{algo}: analytic {a} vs numeric {n}"
                );
            }
        }
    }
}
