//! Sequence types and state-coverage metrics.
//!
//! A generation history is abstracted to its last n tokens; the number of
//! distinct such n-grams inside one trajectory (`C_context`) measures how much
//! of the state space a single rollout actually visits, and its ratio over
//! the window count (`R_context`) measures how non-redundant the visit
//! pattern is. Windows are full windows only: a nonempty trajectory shorter
//! than `n` contributes a single whole-sequence state, and the prompt is
//! never part of the abstraction (the stored body holds generated tokens
//! only, EOS excluded).

use std::collections::{HashMap, HashSet};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("abstraction window length must be at least 1")]
    ZeroWindow,
    #[error("distribution {index} does not sum to 1 (sum = {sum})")]
    UnnormalizedDistribution { index: usize, sum: f64 },
    #[error("distribution {index} has a negative entry")]
    NegativeProbability { index: usize },
    #[error("correlation needs at least 2 samples, got {got}")]
    TooFewSamples { got: usize },
    #[error("correlation undefined: {side} values have zero variance")]
    DegenerateVariance { side: &'static str },
}

/// Ordinary-token alphabet. Token ids live in `[0, size)`; `eos_id` is the
/// termination action and never appears in a stored token body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VocabSpec {
    pub size: usize,
    pub eos_id: usize,
}

impl VocabSpec {
    /// Vocabulary of `size` ordinary tokens with EOS one past the last id.
    pub fn new(size: usize) -> Self {
        assert!(size >= 1, "vocabulary needs at least one ordinary token");
        VocabSpec { size, eos_id: size }
    }
}

/// One autoregressive rollout. `tokens` is the generated body with EOS
/// stripped; `terminated` distinguishes an emitted EOS from truncation at the
/// length budget; `correct` is the outcome label when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
    pub terminated: bool,
    pub correct: Option<bool>,
}

impl Trajectory {
    pub fn new(prompt_id: impl Into<String>, tokens: Vec<u32>, terminated: bool) -> Self {
        Trajectory {
            prompt_id: prompt_id.into(),
            tokens,
            terminated,
            correct: None,
        }
    }

    pub fn with_correct(mut self, correct: bool) -> Self {
        self.correct = Some(correct);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A last-n-gram of the generation history; the unit of visitation counting.
/// The gram is shorter than n only for the degenerate whole-sequence state of
/// a trajectory with `0 < L < n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AbstractState(pub Vec<u32>);

// Lets hash sets keyed by AbstractState probe with a borrowed window before
// paying for an owned copy. Vec<u32> and [u32] hash identically.
impl std::borrow::Borrow<[u32]> for AbstractState {
    fn borrow(&self) -> &[u32] {
        &self.0
    }
}

/// Per-trajectory coverage summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageStats {
    pub c_context: usize,
    pub r_context: f64,
    pub length: usize,
    pub window_count: usize,
}

/// Iterates the abstraction windows of a token body: all length-n slices for
/// `L >= n`, the whole body for `0 < L < n`, nothing for an empty body.
fn windows(tokens: &[u32], n: usize) -> impl Iterator<Item = &[u32]> {
    let take_whole = !tokens.is_empty() && tokens.len() < n;
    let whole = take_whole.then_some(tokens);
    let sliding = if tokens.len() >= n {
        Some(tokens.windows(n))
    } else {
        None
    };
    whole.into_iter().chain(sliding.into_iter().flatten())
}

fn window_count(len: usize, n: usize) -> usize {
    if len == 0 {
        0
    } else if len < n {
        1
    } else {
        len - n + 1
    }
}

fn check_n(n: usize) -> Result<(), TraceError> {
    if n == 0 {
        Err(TraceError::ZeroWindow)
    } else {
        Ok(())
    }
}

/// The ordered abstraction-window sequence of a trajectory.
pub fn abstract_states(traj: &Trajectory, n: usize) -> Result<Vec<AbstractState>, TraceError> {
    check_n(n)?;
    Ok(windows(&traj.tokens, n)
        .map(|w| AbstractState(w.to_vec()))
        .collect())
}

/// In-context distinct state count: distinct abstraction windows in one
/// trajectory. Bounded by `max(1, L - n + 1) <= L` for nonempty bodies.
pub fn distinct_count(traj: &Trajectory, n: usize) -> Result<usize, TraceError> {
    check_n(n)?;
    let mut seen: HashSet<&[u32]> = HashSet::new();
    for w in windows(&traj.tokens, n) {
        seen.insert(w);
    }
    Ok(seen.len())
}

/// Distinct ratio: distinct windows over total windows, 0 for an empty body.
pub fn distinct_ratio(traj: &Trajectory, n: usize) -> Result<f64, TraceError> {
    let c = distinct_count(traj, n)?;
    Ok(c as f64 / window_count(traj.len(), n).max(1) as f64)
}

/// Both coverage numbers in one pass.
pub fn coverage(traj: &Trajectory, n: usize) -> Result<CoverageStats, TraceError> {
    let c = distinct_count(traj, n)?;
    let wc = window_count(traj.len(), n);
    Ok(CoverageStats {
        c_context: c,
        r_context: c as f64 / wc.max(1) as f64,
        length: traj.len(),
        window_count: wc,
    })
}

/// Within-trajectory visitation counts per abstract state. Values sum to the
/// window count.
pub fn visitation_counts(
    traj: &Trajectory,
    n: usize,
) -> Result<HashMap<AbstractState, usize>, TraceError> {
    check_n(n)?;
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    for w in windows(&traj.tokens, n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(w, c)| (AbstractState(w.to_vec()), c))
        .collect())
}

/// Distinct abstract states across a whole collection of trajectories.
pub fn global_distinct(trajs: &[Trajectory], n: usize) -> Result<usize, TraceError> {
    check_n(n)?;
    let mut seen: HashSet<&[u32]> = HashSet::new();
    for traj in trajs {
        for w in windows(&traj.tokens, n) {
            seen.insert(w);
        }
    }
    Ok(seen.len())
}

/// Incremental accumulator behind `global_distinct`, for callers that stream
/// trajectories across training instead of holding them all.
#[derive(Debug, Default)]
pub struct GlobalStateSet {
    seen: HashSet<AbstractState>,
}

impl GlobalStateSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn absorb(&mut self, traj: &Trajectory, n: usize) -> Result<(), TraceError> {
        check_n(n)?;
        for w in windows(&traj.tokens, n) {
            if !self.seen.contains(w) {
                self.seen.insert(AbstractState(w.to_vec()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Shannon entropy in nats of one probability vector, validating that it is a
/// distribution (entries >= 0, sum within 1e-9 of 1). `0 ln 0` counts as 0.
pub fn entropy(p: &[f64]) -> Result<f64, TraceError> {
    validate_distribution(p, 0)?;
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

fn validate_distribution(p: &[f64], index: usize) -> Result<(), TraceError> {
    if p.iter().any(|&x| x < 0.0) {
        return Err(TraceError::NegativeProbability { index });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(TraceError::UnnormalizedDistribution { index, sum });
    }
    Ok(())
}

/// Mean per-step entropy over a sequence of probability vectors; 0 for an
/// empty sequence.
pub fn mean_entropy(step_distributions: &[Vec<f64>]) -> Result<f64, TraceError> {
    if step_distributions.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, p) in step_distributions.iter().enumerate() {
        validate_distribution(p, i)?;
        sum += entropy_unchecked(p);
    }
    Ok(sum / step_distributions.len() as f64)
}

/// Pearson correlation between lengths and in-context distinct counts.
/// Degenerate variance on either side is an error, never a silent 0.
pub fn length_coverage_correlation(samples: &[(f64, f64)]) -> Result<f64, TraceError> {
    if samples.len() < 2 {
        return Err(TraceError::TooFewSamples {
            got: samples.len(),
        });
    }
    let m = samples.len() as f64;
    let mean_x = samples.iter().map(|s| s.0).sum::<f64>() / m;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / m;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in samples {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(TraceError::DegenerateVariance { side: "length" });
    }
    if syy == 0.0 {
        return Err(TraceError::DegenerateVariance { side: "count" });
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(tokens: &[u32]) -> Trajectory {
        Trajectory::new("t", tokens.to_vec(), true)
    }

    fn gram(tokens: &[u32]) -> AbstractState {
        AbstractState(tokens.to_vec())
    }

    #[test]
    fn windows_of_constant_sequence() {
        let states = abstract_states(&traj(&[7, 7, 7]), 2).unwrap();
        assert_eq!(states, vec![gram(&[7, 7]), gram(&[7, 7])]);
    }

    #[test]
    fn windows_enumerated_in_order() {
        let states = abstract_states(&traj(&[1, 2, 1, 2, 3]), 2).unwrap();
        assert_eq!(
            states,
            vec![gram(&[1, 2]), gram(&[2, 1]), gram(&[1, 2]), gram(&[2, 3])]
        );
    }

    #[test]
    fn short_trajectory_collapses_to_whole_sequence_state() {
        let states = abstract_states(&traj(&[5]), 10).unwrap();
        assert_eq!(states, vec![gram(&[5])]);
    }

    #[test]
    fn empty_trajectory_has_no_states() {
        assert!(abstract_states(&traj(&[]), 3).unwrap().is_empty());
        assert_eq!(distinct_count(&traj(&[]), 3).unwrap(), 0);
        assert_eq!(distinct_ratio(&traj(&[]), 3).unwrap(), 0.0);
        assert!(visitation_counts(&traj(&[]), 3).unwrap().is_empty());
    }

    #[test]
    fn zero_window_rejected() {
        assert_eq!(abstract_states(&traj(&[1]), 0), Err(TraceError::ZeroWindow));
        assert_eq!(distinct_count(&traj(&[1]), 0), Err(TraceError::ZeroWindow));
    }

    #[test]
    fn distinct_count_examples() {
        assert_eq!(distinct_count(&traj(&[1, 2, 1, 2, 3]), 2).unwrap(), 3);
        let repeated = vec![4u32; 100];
        assert_eq!(distinct_count(&traj(&repeated), 10).unwrap(), 1);
    }

    #[test]
    fn distinct_ratio_examples() {
        assert!((distinct_ratio(&traj(&[1, 2, 1, 2, 3]), 2).unwrap() - 0.75).abs() < 1e-15);
        let perm: Vec<u32> = (0..20).collect();
        assert_eq!(distinct_ratio(&traj(&perm), 2).unwrap(), 1.0);
        let repeated = vec![4u32; 100];
        let r = distinct_ratio(&traj(&repeated), 10).unwrap();
        assert!((r - 1.0 / 91.0).abs() < 1e-15);
    }

    #[test]
    fn visitation_counts_enumeration() {
        let counts = visitation_counts(&traj(&[1, 2, 1, 2, 3]), 2).unwrap();
        assert_eq!(counts.len(), 3);
        assert_eq!(counts[&gram(&[1, 2])], 2);
        assert_eq!(counts[&gram(&[2, 1])], 1);
        assert_eq!(counts[&gram(&[2, 3])], 1);

        let twelve_nines = vec![9u32; 12];
        let counts = visitation_counts(&traj(&twelve_nines), 10).unwrap();
        assert_eq!(counts.len(), 1);
        assert_eq!(counts[&gram(&[9u32; 10].to_vec())], 3);
    }

    #[test]
    fn visitation_counts_conserve_windows() {
        let t = traj(&[1, 2, 1, 2, 3, 1, 2]);
        for n in 1..=8 {
            let total: usize = visitation_counts(&t, n).unwrap().values().sum();
            assert_eq!(total, abstract_states(&t, n).unwrap().len());
        }
    }

    #[test]
    fn global_distinct_union() {
        let a = traj(&[1, 2, 3]);
        let b = traj(&[3, 2, 1]);
        assert_eq!(global_distinct(&[a.clone(), b.clone()], 2).unwrap(), 4);
        assert_eq!(
            global_distinct(&[a.clone(), a.clone()], 2).unwrap(),
            distinct_count(&a, 2).unwrap()
        );
        assert_eq!(global_distinct(&[], 2).unwrap(), 0);
        // Subadditivity and monotonicity.
        let both = global_distinct(&[a.clone(), b.clone()], 2).unwrap();
        assert!(both <= distinct_count(&a, 2).unwrap() + distinct_count(&b, 2).unwrap());
        assert!(both >= global_distinct(&[a], 2).unwrap());
    }

    #[test]
    fn global_state_set_matches_batch_op() {
        let trajs = vec![traj(&[1, 2, 3]), traj(&[3, 2, 1]), traj(&[1, 2])];
        let mut set = GlobalStateSet::new();
        for t in &trajs {
            set.absorb(t, 2).unwrap();
        }
        assert_eq!(set.len(), global_distinct(&trajs, 2).unwrap());
    }

    #[test]
    fn entropy_examples() {
        let uniform4 = vec![0.25; 4];
        assert!((mean_entropy(&[uniform4]).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        let onehot = vec![0.0, 1.0, 0.0];
        assert_eq!(mean_entropy(&[onehot.clone()]).unwrap(), 0.0);
        let half = vec![0.5, 0.5];
        let m = mean_entropy(&[half, onehot]).unwrap();
        assert!((m - 0.5 * 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(mean_entropy(&[]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_rejects_non_distributions() {
        let err = mean_entropy(&[vec![0.5, 0.6]]).unwrap_err();
        assert!(matches!(
            err,
            TraceError::UnnormalizedDistribution { index: 0, .. }
        ));
        let err = mean_entropy(&[vec![0.5, 0.5], vec![1.5, -0.5]]).unwrap_err();
        assert_eq!(err, TraceError::NegativeProbability { index: 1 });
    }

    #[test]
    fn correlation_examples() {
        let line: Vec<(f64, f64)> = (1..=5).map(|l| (l as f64, 2.0 * l as f64)).collect();
        assert!((length_coverage_correlation(&line).unwrap() - 1.0).abs() < 1e-12);
        let anti: Vec<(f64, f64)> = (1..=5).map(|l| (l as f64, 10.0 - l as f64)).collect();
        assert!((length_coverage_correlation(&anti).unwrap() + 1.0).abs() < 1e-12);
        let mixed = [(1.0, 1.0), (2.0, 3.0), (3.0, 2.0)];
        assert!((length_coverage_correlation(&mixed).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn correlation_degenerate_inputs() {
        assert_eq!(
            length_coverage_correlation(&[(1.0, 2.0)]),
            Err(TraceError::TooFewSamples { got: 1 })
        );
        assert_eq!(
            length_coverage_correlation(&[(1.0, 2.0), (1.0, 3.0)]),
            Err(TraceError::DegenerateVariance { side: "length" })
        );
        assert_eq!(
            length_coverage_correlation(&[(1.0, 2.0), (3.0, 2.0)]),
            Err(TraceError::DegenerateVariance { side: "count" })
        );
    }

    #[test]
    fn capacity_bound_fuzz() {
        // Seeded fuzz over short random bodies; the exhaustive sweep lives in
        // the acceptance suite.
        let mut rng = crate::stream::derive_rng(11, &[0xfa2e]);
        use rand::Rng;
        for _ in 0..2000 {
            let len = rng.random_range(0..40usize);
            let n = rng.random_range(1..12usize);
            let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..5u32)).collect();
            let t = traj(&tokens);
            let c = distinct_count(&t, n).unwrap();
            if len >= 1 {
                let cap = if len >= n { len - n + 1 } else { 1 };
                assert!(c <= cap && cap <= len);
            } else {
                assert_eq!(c, 0);
            }
        }
    }
}
