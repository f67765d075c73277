//! Logit vectors, mask application, softmax, and pluggable samplers.
//!
//! Masking writes a true `f32::NEG_INFINITY` sentinel (never a large finite
//! negative), so the softmax probability of a disallowed token is exactly
//! zero: the constraint is structural, not statistical.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dfa::AllowedSet;
use crate::vocab::TokenId;

/// Sentinel for disallowed tokens.
pub const MASKED: f32 = f32::NEG_INFINITY;

/// A raw or masked score vector of length `|V|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub scores: Vec<f32>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogitsError {
    #[error("logits length {got} does not match vocabulary size {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

impl Logits {
    pub fn new(scores: Vec<f32>) -> Self {
        Self { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Keep scores for tokens in `allowed`, set every other entry to the
/// negative-infinity sentinel. The input is not mutated.
pub fn mask(logits: &Logits, allowed: &AllowedSet<'_>) -> Result<Logits, LogitsError> {
    if logits.len() != allowed.vocab_size as usize {
        return Err(LogitsError::LengthMismatch {
            expected: allowed.vocab_size as usize,
            got: logits.len(),
        });
    }
    let mut out = logits.clone();
    mask_in_place(&mut out, allowed)?;
    Ok(out)
}

/// In-place variant used on the hot path: one pass over the bitmask words.
pub fn mask_in_place(logits: &mut Logits, allowed: &AllowedSet<'_>) -> Result<(), LogitsError> {
    if logits.len() != allowed.vocab_size as usize {
        return Err(LogitsError::LengthMismatch {
            expected: allowed.vocab_size as usize,
            got: logits.len(),
        });
    }
    let scores = &mut logits.scores;
    let len = scores.len();
    for (w, &word) in allowed.words.iter().enumerate() {
        let base = w * 64;
        if word == u64::MAX {
            continue;
        }
        let end = (base + 64).min(len);
        if word == 0 {
            for s in &mut scores[base..end] {
                *s = MASKED;
            }
            continue;
        }
        for (bit, s) in scores[base..end].iter_mut().enumerate() {
            if word >> bit & 1 == 0 {
                *s = MASKED;
            }
        }
    }
    Ok(())
}

/// Numerically stable softmax. Masked entries come out exactly 0.0.
pub fn softmax(logits: &Logits) -> Vec<f32> {
    let max = logits
        .scores
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        // Everything masked: the zero vector, no probability mass anywhere.
        return vec![0.0; logits.len()];
    }
    let exps: Vec<f32> = logits
        .scores
        .iter()
        .map(|&s| if s == MASKED { 0.0 } else { (s - max).exp() })
        .collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Token selection over a masked logit vector.
pub trait Sampler {
    /// Pick a token with non-masked score. `None` when everything is masked.
    fn sample(&mut self, masked: &Logits) -> Option<TokenId>;
}

/// Highest score wins; ties break to the lowest token id.
#[derive(Debug, Default, Clone)]
pub struct GreedySampler;

impl Sampler for GreedySampler {
    fn sample(&mut self, masked: &Logits) -> Option<TokenId> {
        let mut best: Option<(TokenId, f32)> = None;
        for (k, &s) in masked.scores.iter().enumerate() {
            if s == MASKED {
                continue;
            }
            match best {
                Some((_, bs)) if bs >= s => {}
                _ => best = Some((k as TokenId, s)),
            }
        }
        best.map(|(k, _)| k)
    }
}

/// Draws from the softmax distribution with a seeded generator, so a fixed
/// seed reproduces the full token trace bit for bit.
#[derive(Debug, Clone)]
pub struct SeededSoftmaxSampler {
    rng: ChaCha8Rng,
}

impl SeededSoftmaxSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Sampler for SeededSoftmaxSampler {
    fn sample(&mut self, masked: &Logits) -> Option<TokenId> {
        let probs = softmax(masked);
        let total: f32 = probs.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let draw: f32 = self.rng.gen_range(0.0..1.0) * total;
        let mut acc = 0.0;
        let mut last = None;
        for (k, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = Some(k as TokenId);
            if draw < acc {
                return last;
            }
        }
        last
    }
}

/// Seeded stand-in for a model forward pass. In adversarial mode the scores
/// of a chosen "goal" token sequence are boosted far above everything else,
/// which is exactly what the mask must render irrelevant.
#[derive(Debug, Clone)]
pub struct MockLogitSource {
    rng: ChaCha8Rng,
    vocab_size: u32,
    goal: Vec<TokenId>,
    boost: f32,
    step: usize,
}

impl MockLogitSource {
    pub fn new(seed: u64, vocab_size: u32) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            vocab_size,
            goal: Vec::new(),
            boost: 0.0,
            step: 0,
        }
    }

    /// Steer generation toward `goal`, one token per step, with `boost`
    /// added to the goal token's raw score.
    pub fn with_goal(mut self, goal: Vec<TokenId>, boost: f32) -> Self {
        self.goal = goal;
        self.boost = boost;
        self
    }

    pub fn reset_goal(&mut self, goal: Vec<TokenId>) {
        self.goal = goal;
        self.step = 0;
    }

    pub fn next_logits(&mut self) -> Logits {
        let mut scores: Vec<f32> = (0..self.vocab_size)
            .map(|_| self.rng.gen_range(-5.0..5.0))
            .collect();
        if let Some(&want) = self.goal.get(self.step) {
            if (want as usize) < scores.len() {
                scores[want as usize] += self.boost;
            }
        }
        self.step += 1;
        Logits::new(scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfa::compile;
    use crate::grammar::parse_grammar;
    use crate::vocab::Vocabulary;

    fn allowed_fixture(ids: &[TokenId], vocab: u32) -> (crate::dfa::Dfa, u32) {
        // Build a one-step grammar whose start state allows exactly `ids`.
        let mut src = String::new();
        for &id in ids {
            src.push_str(&format!("token \"t{id}\" = {id}\n"));
        }
        for &id in ids {
            src.push_str(&format!("rule S -> \"t{id}\"\n"));
        }
        let g = parse_grammar(&src).unwrap();
        let dfa = compile(&g, &Vocabulary::anonymous(vocab)).unwrap();
        let start = dfa.start();
        (dfa, start)
    }

    #[test]
    fn mask_keeps_allowed_and_sentinels_the_rest() {
        let (dfa, q) = allowed_fixture(&[0, 2], 3);
        let raw = Logits::new(vec![2.0, 1.0, 0.5]);
        let out = mask(&raw, &dfa.allowed(q).unwrap()).unwrap();
        assert_eq!(out.scores, vec![2.0, MASKED, 0.5]);
        assert_eq!(raw.scores, vec![2.0, 1.0, 0.5]);
    }

    #[test]
    fn full_vocabulary_mask_is_identity() {
        let (dfa, q) = allowed_fixture(&[0, 1, 2, 3], 4);
        let raw = Logits::new(vec![0.1, -0.4, 7.0, 3.3]);
        let out = mask(&raw, &dfa.allowed(q).unwrap()).unwrap();
        assert_eq!(out, raw);
    }

    #[test]
    fn masked_softmax_mass_is_exactly_zero() {
        let (dfa, q) = allowed_fixture(&[1, 3], 5);
        let raw = Logits::new(vec![4.0, 1.0, 9.0, 2.0, -1.0]);
        let out = mask(&raw, &dfa.allowed(q).unwrap()).unwrap();
        let probs = softmax(&out);
        assert_eq!(probs[0], 0.0);
        assert_eq!(probs[2], 0.0);
        assert_eq!(probs[4], 0.0);
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let (dfa, q) = allowed_fixture(&[0], 4);
        let raw = Logits::new(vec![1.0; 3]);
        assert!(matches!(
            mask(&raw, &dfa.allowed(q).unwrap()),
            Err(LogitsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn greedy_ignores_masked_maximum() {
        let masked = Logits::new(vec![MASKED, 0.2, 0.9, MASKED]);
        assert_eq!(GreedySampler.sample(&masked), Some(2));
    }

    #[test]
    fn single_allowed_token_is_certain() {
        let mut s = SeededSoftmaxSampler::new(7);
        let masked = Logits::new(vec![MASKED, -3.0, MASKED]);
        for _ in 0..50 {
            assert_eq!(s.sample(&masked), Some(1));
        }
    }

    #[test]
    fn all_masked_samples_nothing() {
        let masked = Logits::new(vec![MASKED; 4]);
        assert_eq!(GreedySampler.sample(&masked), None);
        assert_eq!(SeededSoftmaxSampler::new(1).sample(&masked), None);
    }

    #[test]
    fn seeded_sampler_reproduces_trace() {
        let logits = Logits::new(vec![0.5, 0.1, 0.9, 0.2]);
        let trace = |seed| {
            let mut s = SeededSoftmaxSampler::new(seed);
            (0..32)
                .map(|_| s.sample(&logits).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(trace(99), trace(99));
        assert_ne!(trace(99), trace(100));
    }
}
