//! Desk-scale autoregressive testbed: the deep-key task.
//!
//! The task rewards emitting a goal token at or past a depth D and then
//! stopping, inside a hard length budget. A freshly initialized policy ends
//! sequences early (its EOS probability is bounded below by some ε > 0), so
//! the chance of even reaching depth D decays like `(1 - ε)^D`: reward is
//! reachable only through long trajectories, yet long trajectories are
//! exponentially rare. That is the shallow-exploration trap this module
//! reproduces and, with length-incentivized reward shaping, escapes.
//!
//! Because the policy is a small tabular softmax, everything the experiments
//! claim can be checked exactly: the full length distribution and the success
//! probability come from dynamic programming over context mass, and the
//! exponential-decay bound is verified against those exact numbers rather
//! than sampled estimates.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::groupopt::{self, Algo, ClipRange, GroupError, RolloutGroup};
use crate::policy::{ContextId, MarkovPolicy, PolicyError, MAX_CONTEXTS};
use crate::reward::{self, RewardConfig, RewardError};
use crate::stream::{self, tag};
use crate::trace::{self, GlobalStateSet, TraceError, Trajectory, VocabSpec};

#[derive(Debug, Error, PartialEq)]
pub enum TrapError {
    #[error("bad task: {0}")]
    BadTask(String),
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error(
        "exponential-decay bound inapplicable: context {context} assigns EOS \
         probability 0"
    )]
    EosZero { context: usize },
    #[error("context table for the exact analysis needs {required} rows, max {max}")]
    TableTooLarge { required: usize, max: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// The deep-key task: terminate after placing the goal token at a 1-indexed
/// position at or past `depth`, within a body budget of `budget` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapTask {
    pub vocab: VocabSpec,
    pub depth: usize,
    pub goal_token: u32,
    pub budget: usize,
}

impl TrapTask {
    pub fn new(
        vocab: VocabSpec,
        depth: usize,
        goal_token: u32,
        budget: usize,
    ) -> Result<Self, TrapError> {
        if goal_token as usize >= vocab.size {
            return Err(TrapError::BadTask(format!(
                "goal token {goal_token} outside vocabulary of size {}",
                vocab.size
            )));
        }
        if depth == 0 || depth > budget {
            return Err(TrapError::BadTask(format!(
                "need 1 <= depth <= budget, got depth {depth}, budget {budget}"
            )));
        }
        Ok(TrapTask {
            vocab,
            depth,
            goal_token,
            budget,
        })
    }
}

impl Default for TrapTask {
    fn default() -> Self {
        TrapTask {
            vocab: VocabSpec::new(8),
            depth: 40,
            goal_token: 0,
            budget: 128,
        }
    }
}

/// One sampled rollout with everything downstream consumers need: the body,
/// the per-draw action distributions (for entropy), and the log-probability
/// of every sampled action — body tokens plus the EOS draw when the rollout
/// terminated.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub trajectory: Trajectory,
    pub step_dists: Vec<Vec<f64>>,
    pub logps: Vec<f64>,
}

/// Autoregressive rollout from `start` until EOS or the body budget.
pub fn sample_trajectory(
    policy: &MarkovPolicy,
    task: &TrapTask,
    start: ContextId,
    prompt_id: &str,
    rng: &mut impl Rng,
) -> Result<SampledTrajectory, TrapError> {
    let mut ctx = start;
    let mut tokens: Vec<u32> = Vec::new();
    let mut step_dists = Vec::new();
    let mut logps = Vec::new();
    let mut terminated = false;
    while tokens.len() < task.budget {
        let dist = policy.probs(ctx);
        let action = policy.sample_action(ctx, rng);
        logps.push(policy.log_prob(ctx, action));
        step_dists.push(dist);
        if action == policy.eos_action() {
            terminated = true;
            break;
        }
        let token = action as u32;
        tokens.push(token);
        ctx = policy.advance(ctx, token)?;
    }
    let trajectory = Trajectory::new(prompt_id, tokens, terminated);
    let correct = accuracy_reward(&trajectory, task) == 1.0;
    Ok(SampledTrajectory {
        trajectory: trajectory.with_correct(correct),
        step_dists,
        logps,
    })
}

/// 1 iff the rollout terminated (EOS emitted) and the goal token appears at
/// some 1-indexed position >= depth.
pub fn accuracy_reward(traj: &Trajectory, task: &TrapTask) -> f64 {
    if !traj.terminated || traj.len() < task.depth {
        return 0.0;
    }
    let hit = traj.tokens[task.depth - 1..]
        .iter()
        .any(|&t| t == task.goal_token);
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Exact distribution of the body length under a policy, computed by dynamic
/// programming over the mass assigned to each last-k context.
///
/// `p[l]` is the probability of emitting exactly `l` body tokens and then
/// EOS; `truncated` is the probability of filling the whole horizon without
/// EOS. `p[l_max]` is always 0 because a rollout that reaches the horizon is
/// stopped, not terminated. Everything together sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthDistribution {
    pub p: Vec<f64>,
    pub truncated: f64,
}

impl LengthDistribution {
    pub fn l_max(&self) -> usize {
        self.p.len() - 1
    }

    /// Total probability mass; 1 up to float error.
    pub fn total(&self) -> f64 {
        self.p.iter().sum::<f64>() + self.truncated
    }

    /// Expected body length, counting truncated rollouts at the horizon.
    pub fn mean_length(&self) -> f64 {
        let body: f64 = self
            .p
            .iter()
            .enumerate()
            .map(|(l, &pl)| l as f64 * pl)
            .sum();
        body + self.truncated * self.l_max() as f64
    }

    /// Probability of a body of length >= `d`, truncated mass included.
    pub fn tail_mass(&self, d: usize) -> f64 {
        self.p[d.min(self.p.len() - 1)..].iter().sum::<f64>() + self.truncated
    }
}

fn check_table(policy: &MarkovPolicy) -> Result<(), TrapError> {
    let required = policy.context_count();
    if required > MAX_CONTEXTS {
        return Err(TrapError::TableTooLarge {
            required,
            max: MAX_CONTEXTS,
        });
    }
    Ok(())
}

/// Exact length distribution over horizon `l_max`, starting from `start`.
pub fn exact_length_distribution(
    policy: &MarkovPolicy,
    l_max: usize,
    start: ContextId,
) -> Result<LengthDistribution, TrapError> {
    check_table(policy)?;
    let n_ctx = policy.context_count();
    let eos = policy.eos_action();
    let mut mass = vec![0.0f64; n_ctx];
    mass[start.0] = 1.0;
    let mut p = vec![0.0f64; l_max + 1];
    for pl in p.iter_mut().take(l_max) {
        let mut next = vec![0.0f64; n_ctx];
        let mut stop_here = 0.0;
        for (c, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let probs = policy.probs(ContextId(c));
            stop_here += m * probs[eos];
            for (t, &pt) in probs.iter().take(eos).enumerate() {
                if pt > 0.0 {
                    let nc = policy.advance(ContextId(c), t as u32)?;
                    next[nc.0] += m * pt;
                }
            }
        }
        *pl = stop_here;
        mass = next;
    }
    let truncated = mass.iter().sum();
    Ok(LengthDistribution { p, truncated })
}

/// Minimum EOS probability over every context row. Errors when any row
/// assigns EOS probability 0, because the decay bound's premise fails there.
pub fn min_eos_prob(policy: &MarkovPolicy) -> Result<f64, TrapError> {
    check_table(policy)?;
    let eos = policy.eos_action();
    let mut min = f64::INFINITY;
    let mut argmin = 0usize;
    for c in 0..policy.context_count() {
        let p = policy.probs(ContextId(c))[eos];
        if p < min {
            min = p;
            argmin = c;
        }
    }
    if min <= 0.0 {
        return Err(TrapError::EosZero { context: argmin });
    }
    Ok(min)
}

/// Outcome of checking `p(length = L) < (1 - epsilon)^(L-1)` for
/// `L in [1, l_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayReport {
    pub epsilon: f64,
    pub holds: bool,
    /// Minimum over L of `(1 - epsilon)^(L-1) - p(L)`.
    pub tightest_margin: f64,
    /// The L attaining the tightest margin.
    pub argmin_len: usize,
}

const DECAY_SLACK: f64 = 1e-12;

/// Verifies the exponential-decay bound on exact termination-length
/// probabilities from the all-BOS start context. The distribution is
/// evaluated over a horizon of `l_max + 1` draws so that every checked entry
/// is a genuine termination probability, untouched by horizon truncation.
pub fn verify_decay_bound(
    policy: &MarkovPolicy,
    l_max: usize,
) -> Result<DecayReport, TrapError> {
    if l_max == 0 {
        return Err(TrapError::BadConfig("l_max must be >= 1".into()));
    }
    let epsilon = min_eos_prob(policy)?;
    let dist = exact_length_distribution(policy, l_max + 1, policy.bos_context())?;
    let mut holds = true;
    let mut tightest_margin = f64::INFINITY;
    let mut argmin_len = 1;
    for l in 1..=l_max {
        let bound = (1.0 - epsilon).powi(l as i32 - 1);
        let margin = bound - dist.p[l];
        if margin < tightest_margin {
            tightest_margin = margin;
            argmin_len = l;
        }
        if dist.p[l] >= bound + DECAY_SLACK {
            holds = false;
        }
    }
    Ok(DecayReport {
        epsilon,
        holds,
        tightest_margin,
        argmin_len,
    })
}

/// Exact probability that a rollout from `start` terminates with the goal
/// token at some 1-indexed position >= depth: the success probability of the
/// task, by DP over (context, goal-seen) pairs.
pub fn exact_success_probability(
    policy: &MarkovPolicy,
    task: &TrapTask,
    start: ContextId,
) -> Result<f64, TrapError> {
    check_table(policy)?;
    let n_ctx = policy.context_count();
    let eos = policy.eos_action();
    let mut unseen = vec![0.0f64; n_ctx];
    let mut seen = vec![0.0f64; n_ctx];
    unseen[start.0] = 1.0;
    let mut success = 0.0;
    for body in 0..task.budget {
        let position = body + 1; // position of the token drawn next
        let mut next_unseen = vec![0.0f64; n_ctx];
        let mut next_seen = vec![0.0f64; n_ctx];
        for (c, &m) in seen.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let probs = policy.probs(ContextId(c));
            success += m * probs[eos];
            for (t, &pt) in probs.iter().take(eos).enumerate() {
                if pt > 0.0 {
                    let nc = policy.advance(ContextId(c), t as u32)?;
                    next_seen[nc.0] += m * pt;
                }
            }
        }
        for (c, &m) in unseen.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let probs = policy.probs(ContextId(c));
            for (t, &pt) in probs.iter().take(eos).enumerate() {
                if pt > 0.0 {
                    let nc = policy.advance(ContextId(c), t as u32)?;
                    let hits = t as u32 == task.goal_token && position >= task.depth;
                    if hits {
                        next_seen[nc.0] += m * pt;
                    } else {
                        next_unseen[nc.0] += m * pt;
                    }
                }
            }
        }
        unseen = next_unseen;
        seen = next_seen;
    }
    // Rollouts still running at the budget are truncated, never successful.
    Ok(success)
}

/// Mean body length of `k_samples` rollouts from the (frozen) initial
/// policy, rounded to the nearest integer. Deterministic given the stream.
pub fn estimate_ref_length(
    policy: &MarkovPolicy,
    task: &TrapTask,
    start: ContextId,
    k_samples: usize,
    rng: &mut impl Rng,
) -> Result<usize, TrapError> {
    if k_samples == 0 {
        return Err(TrapError::BadConfig("k_samples must be >= 1".into()));
    }
    let mut total = 0usize;
    for i in 0..k_samples {
        let s = sample_trajectory(policy, task, start, &format!("ref{i}"), rng)?;
        total += s.trajectory.len();
    }
    Ok((total as f64 / k_samples as f64).round() as usize)
}

/// Reward recipe used to score rollouts during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Accuracy only: the trap baseline.
    AccOnly,
    /// Accuracy plus the length incentive, no redundancy penalty.
    AccLen,
    /// Accuracy, length incentive, and redundancy penalty.
    FullLie,
    /// Accuracy plus a count-based novelty bonus over abstract states.
    AccCountBonus,
}

impl std::fmt::Display for Recipe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Recipe::AccOnly => "acc_only",
            Recipe::AccLen => "acc_len",
            Recipe::FullLie => "full_lie",
            Recipe::AccCountBonus => "acc_count_bonus",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Recipe {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "acc_only" => Ok(Recipe::AccOnly),
            "acc_len" | "acc+len" => Ok(Recipe::AccLen),
            "full_lie" => Ok(Recipe::FullLie),
            "acc_count_bonus" | "acc+count_bonus" => Ok(Recipe::AccCountBonus),
            other => Err(format!(
                "recipe must be one of acc_only, acc_len, full_lie, \
                 acc_count_bonus; got '{other}'"
            )),
        }
    }
}

/// Everything one training run needs beyond the task itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub recipe: Recipe,
    pub algo: Algo,
    pub iters: usize,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub lr: f64,
    /// Gradient steps per sampled batch; values above 1 reuse the batch with
    /// clipping active.
    pub updates_per_rollout: usize,
    /// Rollouts per prompt when estimating the reference length.
    pub k_samples_ref: usize,
    pub seed: u64,
    pub reward: RewardConfig,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Scale of the count-based novelty bonus (acc_count_bonus only).
    pub bonus_beta: f64,
    pub policy_order: usize,
    pub init_sigma: f64,
    /// Initial per-context EOS probability the seeded policy is biased
    /// toward.
    pub init_eos_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            recipe: Recipe::FullLie,
            algo: Algo::Gspo,
            iters: 300,
            group_size: 8,
            batch_prompts: 8,
            lr: 8.0,
            updates_per_rollout: 1,
            k_samples_ref: 32,
            seed: 42,
            // Desk-scale mapping of the reward constants: the penalty slope
            // is spread over the 128-token budget, the target offset sits
            // well inside it, and the abstraction window/threshold are sized
            // so redundancy is a live constraint on ~60-token bodies (2-gram
            // states over vocab 8) rather than one that never fires.
            reward: RewardConfig {
                eta: 0.3 / 128.0,
                delta_l: 48,
                n: 2,
                theta: 4,
                ..RewardConfig::default()
            },
            eps_low: 0.2,
            eps_high: 0.2,
            bonus_beta: 0.1,
            policy_order: 2,
            init_sigma: 0.1,
            init_eos_prob: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, task: &TrapTask) -> Result<(), TrapError> {
        let bad = |msg: String| Err(TrapError::BadConfig(msg));
        if self.iters == 0 {
            return bad("iters must be >= 1".into());
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_prompts == 0 {
            return bad("batch_prompts must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive and finite, got {}", self.lr));
        }
        if self.updates_per_rollout == 0 {
            return bad("updates_per_rollout must be >= 1".into());
        }
        if self.k_samples_ref == 0 {
            return bad("k_samples_ref must be >= 1".into());
        }
        if self.policy_order == 0 {
            return bad("policy_order must be >= 1".into());
        }
        if !(self.init_sigma.is_finite() && self.init_sigma >= 0.0) {
            return bad(format!("init_sigma must be >= 0, got {}", self.init_sigma));
        }
        if !(self.init_eos_prob > 0.0 && self.init_eos_prob < 1.0) {
            return bad(format!(
                "init_eos_prob must lie in (0, 1), got {}",
                self.init_eos_prob
            ));
        }
        if !(self.bonus_beta.is_finite() && self.bonus_beta >= 0.0) {
            return bad(format!("bonus_beta must be >= 0, got {}", self.bonus_beta));
        }
        ClipRange::new(self.eps_low, self.eps_high)?;
        self.reward.validate()?;
        let max_prompts = (task.vocab.size as u128).pow(self.policy_order as u32);
        if (self.batch_prompts as u128) > max_prompts {
            return bad(format!(
                "batch_prompts {} exceeds the {} distinct prompts of length {}",
                self.batch_prompts, max_prompts, self.policy_order
            ));
        }
        Ok(())
    }

    fn clip(&self) -> Result<ClipRange, GroupError> {
        ClipRange::new(self.eps_low, self.eps_high)
    }
}

/// One row of the training log; field names are the metrics-file column
/// vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub mean_length: f64,
    pub mean_c_context: f64,
    pub mean_r_context: f64,
    /// Cumulative distinct abstract states across the whole run so far.
    pub c_global: usize,
    pub mean_entropy: f64,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub mean_len_term: f64,
    /// Fraction of rollouts whose redundancy indicator fired (diagnostic for
    /// every recipe, part of the reward only under full_lie).
    pub red_fire_rate: f64,
}

/// Names of the per-iteration metrics, in file-column order (after `iter`).
pub const METRIC_NAMES: [&str; 9] = [
    "mean_length",
    "mean_c_context",
    "mean_r_context",
    "c_global",
    "mean_entropy",
    "success_rate",
    "mean_reward",
    "mean_len_term",
    "red_fire_rate",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    pub warnings: Vec<String>,
}

/// A training prompt: its stable id, token prefix, and estimated reference
/// length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub tokens: Vec<u32>,
    pub ref_len: usize,
}

/// One rollout of the final iteration, kept for offline re-analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalRollout {
    pub trajectory: Trajectory,
    pub ref_len: usize,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub policy: MarkovPolicy,
    pub prompts: Vec<PromptSpec>,
    pub final_rollouts: Vec<FinalRollout>,
}

/// Draws `count` distinct prompt prefixes of length `order`.
fn generate_prompts(
    task: &TrapTask,
    order: usize,
    count: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    let mut rng = stream::derive_rng(seed, &[tag::PROMPTS]);
    let mut seen = std::collections::HashSet::new();
    let mut prompts = Vec::with_capacity(count);
    while prompts.len() < count {
        let candidate: Vec<u32> = (0..order)
            .map(|_| rng.random_range(0..task.vocab.size as u32))
            .collect();
        if seen.insert(candidate.clone()) {
            prompts.push(candidate);
        }
    }
    prompts
}

struct Scored {
    acc: f64,
    len_term: f64,
    red_fired: bool,
    total: f64,
}

fn score_rollout(
    recipe: Recipe,
    traj: &Trajectory,
    task: &TrapTask,
    ref_len: usize,
    rc: &RewardConfig,
    bonus_beta: f64,
    state_counts: &mut HashMap<trace::AbstractState, usize>,
) -> Result<Scored, TrapError> {
    let acc = accuracy_reward(traj, task);
    let target = reward::target_length(ref_len, rc.delta_l);
    let len_term = reward::length_reward(traj.len(), target, acc == 1.0, rc.eta);
    let counts = trace::visitation_counts(traj, rc.n)?;
    let red_term = reward::redundancy_penalty(&counts, rc.theta, rc.redundancy_semantics);
    let total = match recipe {
        Recipe::AccOnly => acc,
        Recipe::AccLen => acc + len_term,
        Recipe::FullLie => acc + len_term + rc.beta * red_term,
        Recipe::AccCountBonus => {
            let mut bonus = 0.0;
            for state in trace::abstract_states(traj, rc.n)? {
                let n_sa = state_counts
                    .entry(state)
                    .and_modify(|c| *c += 1)
                    .or_insert(1);
                bonus += reward::count_bonus(*n_sa, bonus_beta)?;
            }
            acc + bonus
        }
    };
    Ok(Scored {
        acc,
        len_term,
        red_fired: red_term != 0.0,
        total,
    })
}

/// Runs group-relative policy optimization on the deep-key task.
///
/// Per iteration: sample `batch_prompts` groups of `group_size` rollouts
/// (concurrently, on streams indexed by iteration/prompt/rollout slot), score
/// them with the recipe in slot order, record metrics, then update the
/// policy. Reference lengths are estimated once per prompt from the initial
/// policy. Deterministic in the config, regardless of thread count.
pub fn train(task: &TrapTask, cfg: &TrainConfig) -> Result<TrainOutcome, TrapError> {
    use rayon::prelude::*;

    cfg.validate(task)?;
    let eos_bias = MarkovPolicy::eos_bias_for(task.vocab, cfg.init_eos_prob);
    let mut policy = MarkovPolicy::seeded(
        task.vocab,
        cfg.policy_order,
        cfg.seed,
        cfg.init_sigma,
        eos_bias,
    )?;
    let bodies = generate_prompts(task, cfg.policy_order, cfg.batch_prompts, cfg.seed);

    let mut warnings = Vec::new();
    let mut prompts = Vec::with_capacity(bodies.len());
    let mut starts = Vec::with_capacity(bodies.len());
    for (p, tokens) in bodies.into_iter().enumerate() {
        let id = format!("p{p:02}");
        let start = policy.start_context(&tokens)?;
        let mut rng = stream::derive_rng(cfg.seed, &[tag::REF_LENGTH, p as u64]);
        let ref_len =
            estimate_ref_length(&policy, task, start, cfg.k_samples_ref, &mut rng)?;
        let target = reward::target_length(ref_len, cfg.reward.delta_l);
        if target > task.budget {
            warnings.push(format!(
                "prompt {id}: target length {target} exceeds budget {}; the \
                 length incentive cannot be satisfied by terminated rollouts",
                task.budget
            ));
        }
        starts.push(start);
        prompts.push(PromptSpec {
            id,
            tokens,
            ref_len,
        });
    }

    let clip = cfg.clip()?;
    let mut records = Vec::with_capacity(cfg.iters);
    let mut global_states = GlobalStateSet::new();
    let mut bonus_counts: HashMap<trace::AbstractState, usize> = HashMap::new();
    let mut final_rollouts = Vec::new();

    let b = cfg.batch_prompts;
    let g = cfg.group_size;
    for it in 1..=cfg.iters {
        // Sampling: slot-indexed RNG streams make the result independent of
        // scheduling; collect() preserves slot order.
        let sampled: Vec<Result<SampledTrajectory, TrapError>> = (0..b * g)
            .into_par_iter()
            .map(|slot| {
                let (p, r) = (slot / g, slot % g);
                let mut rng = stream::derive_rng(
                    cfg.seed,
                    &[tag::ROLLOUT, it as u64, p as u64, r as u64],
                );
                sample_trajectory(&policy, task, starts[p], &prompts[p].id, &mut rng)
            })
            .collect();
        let mut rollouts = Vec::with_capacity(b * g);
        for s in sampled {
            rollouts.push(s?);
        }

        // Scoring and metrics, sequential in slot order.
        let mut groups = Vec::with_capacity(b);
        let mut advs = Vec::with_capacity(b);
        let mut sums = MetricSums::default();
        for p in 0..b {
            let slice = &rollouts[p * g..(p + 1) * g];
            let mut rewards = Vec::with_capacity(g);
            for s in slice {
                let scored = score_rollout(
                    cfg.recipe,
                    &s.trajectory,
                    task,
                    prompts[p].ref_len,
                    &cfg.reward,
                    cfg.bonus_beta,
                    &mut bonus_counts,
                )?;
                let cov = trace::coverage(&s.trajectory, cfg.reward.n)?;
                global_states.absorb(&s.trajectory, cfg.reward.n)?;
                sums.add(&scored, &cov, trace::mean_entropy(&s.step_dists)?);
                rewards.push(scored.total);
            }
            let logps: Vec<Vec<f64>> = slice.iter().map(|s| s.logps.clone()).collect();
            let trajectories: Vec<Trajectory> =
                slice.iter().map(|s| s.trajectory.clone()).collect();
            let group = RolloutGroup::new(
                prompts[p].id.clone(),
                trajectories,
                rewards.clone(),
                logps.clone(),
                logps,
            )?;
            advs.push(groupopt::group_advantages(&rewards)?);
            groups.push(group);
        }

        records.push(sums.record(it, b * g, global_states.len()));

        if it == cfg.iters {
            for (p, spec) in prompts.iter().enumerate() {
                for (r, s) in rollouts[p * g..(p + 1) * g].iter().enumerate() {
                    final_rollouts.push(FinalRollout {
                        trajectory: s.trajectory.clone(),
                        ref_len: spec.ref_len,
                        group: r,
                    });
                }
            }
        }

        groupopt::reinforce_update(&mut policy, &groups, &advs, &starts, cfg.lr, cfg.algo)?;
        for _ in 1..cfg.updates_per_rollout {
            groupopt::surrogate_step(
                &mut policy,
                &groups,
                &advs,
                &starts,
                cfg.lr,
                clip,
                cfg.algo,
            )?;
        }
    }

    Ok(TrainOutcome {
        log: TrainLog { records, warnings },
        policy,
        prompts,
        final_rollouts,
    })
}

#[derive(Default)]
struct MetricSums {
    length: f64,
    c_context: f64,
    r_context: f64,
    entropy: f64,
    acc: f64,
    reward: f64,
    len_term: f64,
    red_fires: f64,
}

impl MetricSums {
    fn add(&mut self, scored: &Scored, cov: &trace::CoverageStats, entropy: f64) {
        self.length += cov.length as f64;
        self.c_context += cov.c_context as f64;
        self.r_context += cov.r_context;
        self.entropy += entropy;
        self.acc += scored.acc;
        self.reward += scored.total;
        self.len_term += scored.len_term;
        self.red_fires += f64::from(scored.red_fired);
    }

    fn record(&self, iter: usize, count: usize, c_global: usize) -> IterRecord {
        let n = count as f64;
        IterRecord {
            iter,
            mean_length: self.length / n,
            mean_c_context: self.c_context / n,
            mean_r_context: self.r_context / n,
            c_global,
            mean_entropy: self.entropy / n,
            success_rate: self.acc / n,
            mean_reward: self.reward / n,
            mean_len_term: self.len_term / n,
            red_fire_rate: self.red_fires / n,
        }
    }
}
