//! Evidence scoring: expected n-gram overlap with a posterior table.
//!
//! A candidate sequence `y` earns a length reward plus, for every n-gram
//! occurrence in `y`, the n-gram's weighted posterior:
//!
//! `E(y) = theta_len * |y| + sum over orders n, occurrences u of
//! theta[n] * P(u)`
//!
//! The same quantity decomposes over positions: appending token `y_t`
//! contributes the length reward plus the posteriors of the up-to-four
//! n-grams *ending* at `t`. The whole-sequence form
//! ([`evidence`]) aggregates occurrence counts per distinct n-gram; the
//! stepwise form ([`stepwise_gain`] folded by [`accumulate_evidence`])
//! walks positions. They are algebraically identical, which the test
//! suite exploits as a correctness check, and the stepwise form is what
//! makes left-to-right beam search possible.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::posteriors::{PosteriorTable, MAX_ORDER};
use crate::symbols::TokenId;

/// Weights of the evidence combination: one reward per emitted token and
/// one multiplier per n-gram order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbrWeights {
    /// Reward added for every token of the candidate.
    pub length: f64,
    /// Multiplier for order-`n` posteriors at index `n - 1`.
    pub ngram: [f64; MAX_ORDER],
}

impl Default for MbrWeights {
    /// All weights one; the flat setting that works well in practice.
    fn default() -> Self {
        MbrWeights {
            length: 1.0,
            ngram: [1.0; MAX_ORDER],
        }
    }
}

impl MbrWeights {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.length).chain(self.ngram);
        for w in all {
            if !w.is_finite() {
                return Err(Error::Invalid(format!("non-finite evidence weight {w}")));
            }
        }
        Ok(())
    }
}

/// Whole-sequence evidence of `tokens`: length reward plus
/// `count * posterior` summed over the distinct n-grams of the sequence.
/// The empty sequence has zero evidence.
pub fn evidence(tokens: &[TokenId], table: &PosteriorTable, weights: &MbrWeights) -> f64 {
    let mut counts: HashMap<&[TokenId], u32> = HashMap::new();
    let max_n = MAX_ORDER.min(tokens.len());
    for n in 1..=max_n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    // Sort for a deterministic summation order; the stepwise route is the
    // independent computation, this one should at least be reproducible.
    let mut rows: Vec<(&[TokenId], u32)> = counts.into_iter().collect();
    rows.sort_unstable();
    let mut total = weights.length * tokens.len() as f64;
    for (ngram, count) in rows {
        total += weights.ngram[ngram.len() - 1] * count as f64 * table.lookup(ngram);
    }
    total
}

/// Evidence gained by appending `next` to `history`: the length reward
/// plus the weighted posteriors of every n-gram ending at the new
/// position. Orders longer than the extended sequence contribute nothing.
pub fn stepwise_gain(
    history: &[TokenId],
    next: TokenId,
    table: &PosteriorTable,
    weights: &MbrWeights,
) -> f64 {
    let mut gain = weights.length;
    let mut ngram: [TokenId; MAX_ORDER] = [0; MAX_ORDER];
    let max_n = MAX_ORDER.min(history.len() + 1);
    for n in 1..=max_n {
        // The n-gram ending at the new position: the last n-1 history
        // tokens followed by `next`.
        let tail = &history[history.len() - (n - 1)..];
        ngram[..n - 1].copy_from_slice(tail);
        ngram[n - 1] = next;
        gain += weights.ngram[n - 1] * table.lookup(&ngram[..n]);
    }
    gain
}

/// Folds [`stepwise_gain`] over the whole sequence; equal to
/// [`evidence`] up to floating-point reassociation.
pub fn accumulate_evidence(
    tokens: &[TokenId],
    table: &PosteriorTable,
    weights: &MbrWeights,
) -> f64 {
    let mut total = 0.0;
    for (t, &token) in tokens.iter().enumerate() {
        total += stepwise_gain(&tokens[..t], token, table, weights);
    }
    total
}

/// Decision rule combining evidence with a scorer log probability.
/// `lambda` scales the scorer's contribution; zero ignores it entirely,
/// including a `-inf` log probability (otherwise `0 * -inf` would poison
/// the score).
pub fn combined_score(evidence: f64, scorer_logprob: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return evidence;
    }
    evidence + lambda * scorer_logprob
}

/// Picks the hypothesis with the highest evidence. Ties keep the earliest
/// position, so the argmax is deterministic for any input order. Returns
/// `(index, evidence)`.
pub fn lmbr_rescore(
    hypotheses: &[Vec<TokenId>],
    table: &PosteriorTable,
    weights: &MbrWeights,
) -> Result<(usize, f64)> {
    weights.validate()?;
    if hypotheses.is_empty() {
        return Err(Error::Invalid("no hypotheses to rescore".into()));
    }
    let mut best = (0, evidence(&hypotheses[0], table, weights));
    for (i, hyp) in hypotheses.iter().enumerate().skip(1) {
        let e = evidence(hyp, table, weights);
        if e > best.1 {
            best = (i, e);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posteriors::compute_posterior_table;
    use crate::symbols::SymbolTable;
    use crate::testing;

    fn fixture_table() -> (PosteriorTable, SymbolTable) {
        let mut symbols = SymbolTable::new();
        let lat = testing::fixture(&mut symbols).normalize_posterior(1.0).unwrap();
        let table = compute_posterior_table(&lat, 4, 0.0).unwrap();
        (table, symbols)
    }

    #[test]
    fn fixture_evidence_matches_hand_computation() {
        let (table, mut symbols) = fixture_table();
        let seq = symbols.intern_line("a b").unwrap();
        let weights = MbrWeights::default();
        // 2 tokens + P(a) + P(b) + P(a b) = 2 + 1 + 0.6 + 0.6.
        let e = evidence(&seq, &table, &weights);
        assert!((e - 4.20002).abs() < 1e-4, "evidence of `a b` should be ~4.20002, got {e}");
        let other = symbols.intern_line("a c").unwrap();
        let e2 = evidence(&other, &table, &weights);
        assert!((e2 - 3.8).abs() < 1e-3, "evidence of `a c` should be ~3.8, got {e2}");
    }

    #[test]
    fn empty_sequence_has_zero_evidence() {
        let (table, _) = fixture_table();
        assert_eq!(evidence(&[], &table, &MbrWeights::default()), 0.0);
        assert_eq!(accumulate_evidence(&[], &table, &MbrWeights::default()), 0.0);
    }

    #[test]
    fn repeated_ngrams_count_multiply() {
        let (table, mut symbols) = fixture_table();
        let weights = MbrWeights {
            length: 0.0,
            ngram: [1.0, 0.0, 0.0, 0.0],
        };
        let a = symbols.intern("a").unwrap();
        let e = evidence(&[a, a, a], &table, &weights);
        assert!((e - 3.0).abs() < 1e-9, "three occurrences of `a` at P=1, got {e}");
    }

    #[test]
    fn stepwise_gain_uses_only_available_orders() {
        let (table, mut symbols) = fixture_table();
        let weights = MbrWeights::default();
        let seq = symbols.intern_line("a b").unwrap();
        let first = stepwise_gain(&[], seq[0], &table, &weights);
        assert!((first - 2.0).abs() < 1e-9, "1 + P(a), got {first}");
        let second = stepwise_gain(&seq[..1], seq[1], &table, &weights);
        assert!((second - 2.2).abs() < 1e-3, "1 + P(b) + P(a b), got {second}");
    }

    #[test]
    fn both_evidence_routes_agree_on_random_data()  {
        use rand::{Rng, SeedableRng};
        let weights = MbrWeights::default();
        for seed in 0..60 {
            let lat = testing::random_lattice(seed).normalize_posterior(1.0).unwrap();
            let table = compute_posterior_table(&lat, 4, 0.1).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            for _ in 0..5 {
                let len = rng.random_range(0..12);
                let seq: Vec<TokenId> =
                    (0..len).map(|_| 3 + rng.random_range(0..4)).collect();
                let whole = evidence(&seq, &table, &weights);
                let folded = accumulate_evidence(&seq, &table, &weights);
                assert!(
                    (whole - folded).abs() <= 1e-12,
                    "seed {seed}, seq {seq:?}: {whole} vs {folded}"
                );
            }
        }
    }

    #[test]
    fn rescore_prefers_the_higher_evidence_path() {
        let (table, mut symbols) = fixture_table();
        let hyps = vec![
            symbols.intern_line("a c").unwrap(),
            symbols.intern_line("a b").unwrap(),
        ];
        let (idx, e) = lmbr_rescore(&hyps, &table, &MbrWeights::default()).unwrap();
        assert_eq!(idx, 1, "`a b` carries more posterior mass");
        assert!((e - 4.20002).abs() < 1e-4);
    }

    #[test]
    fn rescore_ties_keep_the_earliest_hypothesis() {
        let (table, mut symbols) = fixture_table();
        let hyp = symbols.intern_line("a b").unwrap();
        let hyps = vec![hyp.clone(), hyp];
        let (idx, _) = lmbr_rescore(&hyps, &table, &MbrWeights::default()).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn rescore_rejects_empty_input() {
        let (table, _) = fixture_table();
        assert!(lmbr_rescore(&[], &table, &MbrWeights::default()).is_err());
    }

    #[test]
    fn combined_score_scales_the_scorer_term() {
        assert_eq!(combined_score(4.2, -4.0, 0.0), 4.2);
        assert!((combined_score(4.2, -4.0, 1.0) - 0.2).abs() < 1e-12);
        assert!((combined_score(4.2, -4.0, 0.5) - 2.2).abs() < 1e-12);
        assert_eq!(
            combined_score(4.2, f64::NEG_INFINITY, 0.0),
            4.2,
            "lambda zero must ignore an impossible scorer term"
        );
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let weights = MbrWeights {
            length: f64::NAN,
            ngram: [1.0; 4],
        };
        assert!(weights.validate().is_err());
    }
}
