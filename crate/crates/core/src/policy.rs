//! Order-k tabular softmax policy over a small vocabulary plus EOS.
//!
//! The context is the last k emitted tokens, left-padded with a
//! begin-of-sequence symbol, so the table has `(size + 1)^k` rows (token ids
//! plus BOS) and `size + 1` actions (token ids plus EOS). Dense storage keeps
//! exact dynamic programming over context distributions and exact surrogate
//! gradients cheap: both reuse the row indexing directly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::stream::{self, tag};
use crate::trace::VocabSpec;

/// Hard cap on the context-table row count; covers order <= 4 at vocab 8 with
/// lots of slack while refusing table sizes that could not be iterated by the
/// exact DP anyway.
pub const MAX_CONTEXTS: usize = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("context table needs {required} rows, above the {max} cap")]
    TableTooLarge { required: u128, max: usize },
    #[error("policy order must be at least 1")]
    ZeroOrder,
    #[error("token {token} outside vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },
    #[error("logit table has {got} entries, expected {expected}")]
    MalformedTable { got: usize, expected: usize },
}

/// Index of one context row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContextId(pub usize);

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarkovPolicy {
    vocab: VocabSpec,
    order: usize,
    /// Row-major `(contexts x actions)` logits; action `vocab.size` is EOS.
    logits: Vec<f64>,
}

impl MarkovPolicy {
    /// Uniform policy: all logits zero.
    pub fn uniform(vocab: VocabSpec, order: usize) -> Result<Self, PolicyError> {
        let contexts = context_count(vocab.size, order)?;
        Ok(MarkovPolicy {
            vocab,
            order,
            logits: vec![0.0; contexts * (vocab.size + 1)],
        })
    }

    /// Random initialization: logits i.i.d. Normal(0, sigma) with `eos_bias`
    /// added to every EOS logit. A bias of `ln(size * p / (1 - p))` puts the
    /// typical per-context EOS probability near `p`.
    pub fn seeded(
        vocab: VocabSpec,
        order: usize,
        seed: u64,
        sigma: f64,
        eos_bias: f64,
    ) -> Result<Self, PolicyError> {
        let mut policy = Self::uniform(vocab, order)?;
        let mut rng = stream::derive_rng(seed, &[tag::POLICY_INIT]);
        let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
        let actions = policy.action_count();
        for (i, logit) in policy.logits.iter_mut().enumerate() {
            *logit = normal.sample(&mut rng);
            if i % actions == vocab.size {
                *logit += eos_bias;
            }
        }
        Ok(policy)
    }

    /// EOS bias giving initial EOS probability close to `p` under near-zero
    /// token logits.
    pub fn eos_bias_for(vocab: VocabSpec, p: f64) -> f64 {
        (vocab.size as f64 * p / (1.0 - p)).ln()
    }

    /// Rebuilds a policy from parts, validating the table shape.
    pub fn from_logits(
        vocab: VocabSpec,
        order: usize,
        logits: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        let contexts = context_count(vocab.size, order)?;
        let expected = contexts * (vocab.size + 1);
        if logits.len() != expected {
            return Err(PolicyError::MalformedTable {
                got: logits.len(),
                expected,
            });
        }
        Ok(MarkovPolicy {
            vocab,
            order,
            logits,
        })
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of context rows, `(size + 1)^order`.
    pub fn context_count(&self) -> usize {
        self.logits.len() / self.action_count()
    }

    /// Number of actions per row: ordinary tokens plus EOS.
    pub fn action_count(&self) -> usize {
        self.vocab.size + 1
    }

    pub fn eos_action(&self) -> usize {
        self.vocab.size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row(&self, ctx: ContextId) -> &[f64] {
        let a = self.action_count();
        &self.logits[ctx.0 * a..(ctx.0 + 1) * a]
    }

    /// All-BOS starting context (empty prompt).
    pub fn bos_context(&self) -> ContextId {
        let base = self.vocab.size + 1;
        let bos = self.vocab.size;
        let mut id = 0usize;
        for _ in 0..self.order {
            id = id * base + bos;
        }
        ContextId(id)
    }

    /// Context after emitting `token` in context `ctx`: the oldest slot drops
    /// off and `token` becomes the most recent digit.
    pub fn advance(&self, ctx: ContextId, token: u32) -> Result<ContextId, PolicyError> {
        if token as usize >= self.vocab.size {
            return Err(PolicyError::TokenOutOfRange {
                token,
                size: self.vocab.size,
            });
        }
        let base = self.vocab.size + 1;
        let keep = self.context_count() / base;
        Ok(ContextId((ctx.0 % keep) * base + token as usize))
    }

    /// Starting context for a token prefix (prompt): the last `order` tokens,
    /// BOS-padded on the left when the prefix is shorter.
    pub fn start_context(&self, prefix: &[u32]) -> Result<ContextId, PolicyError> {
        let mut ctx = self.bos_context();
        for &t in prefix {
            ctx = self.advance(ctx, t)?;
        }
        Ok(ctx)
    }

    /// Softmax probabilities of one context row.
    pub fn probs(&self, ctx: ContextId) -> Vec<f64> {
        let row = self.row(ctx);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = out.iter().sum();
        for p in &mut out {
            *p /= z;
        }
        out
    }

    /// Log-probabilities of one context row.
    pub fn log_probs(&self, ctx: ContextId) -> Vec<f64> {
        let row = self.row(ctx);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let log_z = z.ln() + max;
        row.iter().map(|&l| l - log_z).collect()
    }

    pub fn log_prob(&self, ctx: ContextId, action: usize) -> f64 {
        self.log_probs(ctx)[action]
    }

    /// Samples one action by CDF inversion in action-index order, so the draw
    /// is a pure function of the stream state.
    pub fn sample_action(&self, ctx: ContextId, rng: &mut impl Rng) -> usize {
        let probs = self.probs(ctx);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        probs.len() - 1
    }

    /// Walks a token body from `start`, yielding each step's context. The
    /// returned list has one entry per body token plus the context that
    /// follows the final token (where EOS would be scored).
    pub fn context_walk(
        &self,
        start: ContextId,
        tokens: &[u32],
    ) -> Result<Vec<ContextId>, PolicyError> {
        let mut out = Vec::with_capacity(tokens.len() + 1);
        let mut ctx = start;
        for &t in tokens {
            out.push(ctx);
            ctx = self.advance(ctx, t)?;
        }
        out.push(ctx);
        Ok(out)
    }
}

/// Validated row count `(size + 1)^order`.
pub fn context_count(vocab_size: usize, order: usize) -> Result<usize, PolicyError> {
    if order == 0 {
        return Err(PolicyError::ZeroOrder);
    }
    let base = (vocab_size + 1) as u128;
    let mut rows: u128 = 1;
    for _ in 0..order {
        rows = rows.saturating_mul(base);
        if rows > MAX_CONTEXTS as u128 {
            return Err(PolicyError::TableTooLarge {
                required: rows,
                max: MAX_CONTEXTS,
            });
        }
    }
    Ok(rows as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy8() -> MarkovPolicy {
        MarkovPolicy::uniform(VocabSpec::new(8), 2).unwrap()
    }

    #[test]
    fn table_dimensions() {
        let p = policy8();
        assert_eq!(p.context_count(), 81);
        assert_eq!(p.action_count(), 9);
        assert_eq!(p.logits().len(), 81 * 9);
    }

    #[test]
    fn capacity_cap_enforced() {
        // 9^7 = 4_782_969 > 2^20.
        assert!(matches!(
            context_count(8, 7),
            Err(PolicyError::TableTooLarge { .. })
        ));
        assert_eq!(context_count(8, 2).unwrap(), 81);
        assert!(matches!(context_count(8, 0), Err(PolicyError::ZeroOrder)));
    }

    #[test]
    fn uniform_rows_are_uniform() {
        let p = policy8();
        let probs = p.probs(p.bos_context());
        for &x in &probs {
            assert!((x - 1.0 / 9.0).abs() < 1e-12);
        }
        let lp = p.log_probs(p.bos_context());
        for &x in &lp {
            assert!((x - (1.0f64 / 9.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn advance_tracks_last_k_tokens() {
        let p = policy8();
        // After emitting 3 then 5, the context must match the start context
        // of the prefix [3, 5] and differ from [5, 3].
        let mut ctx = p.bos_context();
        ctx = p.advance(ctx, 3).unwrap();
        ctx = p.advance(ctx, 5).unwrap();
        assert_eq!(ctx, p.start_context(&[3, 5]).unwrap());
        assert_eq!(ctx, p.start_context(&[1, 2, 3, 5]).unwrap());
        assert_ne!(ctx, p.start_context(&[5, 3]).unwrap());
    }

    #[test]
    fn advance_rejects_out_of_vocab_tokens() {
        let p = policy8();
        assert_eq!(
            p.advance(p.bos_context(), 8),
            Err(PolicyError::TokenOutOfRange { token: 8, size: 8 })
        );
    }

    #[test]
    fn context_ids_are_injective_over_short_histories() {
        let p = policy8();
        let mut seen = std::collections::HashSet::new();
        for a in 0..8u32 {
            for b in 0..8u32 {
                assert!(seen.insert(p.start_context(&[a, b]).unwrap()));
            }
        }
        for a in 0..8u32 {
            assert!(seen.insert(p.start_context(&[a]).unwrap()));
        }
        assert!(seen.insert(p.bos_context()));
        assert_eq!(seen.len(), 64 + 8 + 1);
    }

    #[test]
    fn seeded_init_is_reproducible_and_biased() {
        let vocab = VocabSpec::new(8);
        let bias = MarkovPolicy::eos_bias_for(vocab, 0.1);
        let a = MarkovPolicy::seeded(vocab, 2, 7, 0.1, bias).unwrap();
        let b = MarkovPolicy::seeded(vocab, 2, 7, 0.1, bias).unwrap();
        assert_eq!(a, b);
        let c = MarkovPolicy::seeded(vocab, 2, 8, 0.1, bias).unwrap();
        assert_ne!(a, c);
        // EOS probability should sit near 0.1 in every context.
        for row in 0..a.context_count() {
            let p_eos = a.probs(ContextId(row))[a.eos_action()];
            assert!(p_eos > 0.05 && p_eos < 0.2, "p_eos = {p_eos}");
        }
    }

    #[test]
    fn sampling_matches_row_distribution() {
        let vocab = VocabSpec::new(4);
        let p = MarkovPolicy::seeded(vocab, 1, 3, 0.5, 0.0).unwrap();
        let ctx = p.start_context(&[2]).unwrap();
        let probs = p.probs(ctx);
        let mut rng = crate::stream::derive_rng(99, &[1]);
        let mut counts = vec![0usize; p.action_count()];
        let draws = 200_000;
        for _ in 0..draws {
            counts[p.sample_action(ctx, &mut rng)] += 1;
        }
        for (a, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            let se = (probs[a] * (1.0 - probs[a]) / draws as f64).sqrt();
            assert!(
                (freq - probs[a]).abs() < 4.0 * se + 1e-4,
                "action {a}: freq {freq} vs p {}",
                probs[a]
            );
        }
    }

    #[test]
    fn context_walk_covers_body_plus_terminal() {
        let p = policy8();
        let start = p.start_context(&[1, 2]).unwrap();
        let walk = p.context_walk(start, &[4, 5, 6]).unwrap();
        assert_eq!(walk.len(), 4);
        assert_eq!(walk[0], start);
        assert_eq!(walk[1], p.start_context(&[2, 4]).unwrap());
        assert_eq!(walk[3], p.start_context(&[5, 6]).unwrap());
    }

    #[test]
    fn serde_round_trip() {
        let vocab = VocabSpec::new(3);
        let p = MarkovPolicy::seeded(vocab, 2, 5, 0.2, -0.5).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: MarkovPolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }
}
