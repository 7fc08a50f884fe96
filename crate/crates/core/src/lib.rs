//! Length-incentivized exploration at desk scale.
//!
//! The crate has three layers:
//!
//! * measurement — [`trace`] turns token sequences into last-n-gram abstract
//!   states and computes in-context / global coverage statistics;
//! * shaping — [`reward`] scores trajectories with the accuracy + length +
//!   redundancy recipe (plus a count-based bonus baseline), and [`groupopt`]
//!   provides group-normalized advantages and the GRPO/GSPO clipped
//!   surrogates with their exact gradients;
//! * validation — [`bandit`] is a UCB1 reference for the count-bonus theory,
//!   and [`trapsim`] is a synthetic autoregressive MDP (the "deep-key task")
//!   whose exact length-distribution DP and training loop reproduce the
//!   shallow exploration trap and its escape.
//!
//! Everything is deterministic given a seed: rollout streams are derived from
//! `(seed, iteration, prompt, rollout)` counters, so results do not depend on
//! thread count or scheduling.

pub mod bandit;
pub mod groupopt;
pub mod policy;
pub mod reward;
pub mod stream;
pub mod trace;
pub mod trapsim;
