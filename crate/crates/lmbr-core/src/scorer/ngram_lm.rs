//! Count-based n-gram language model with additive smoothing,
//! interpolated with lower orders.
//!
//! The conditional probability of `w` after a context of `n - 1` tokens
//! is
//!
//! `P_n(w | ctx) = (c(ctx w) + k * |V| * P_{n-1}(w | ctx[1..])) /
//! (c(ctx) + k * |V|)`
//!
//! grounded at `P_1(w) = (c(w) + k) / (N + k * |V|)`. Contexts shorter
//! than `n - 1` (sentence starts) back off to the order that fits, so no
//! begin-of-sentence padding is needed. Every sentence contributes one
//! end-of-sentence event, and the vocabulary always contains the unknown
//! and end-of-sentence tokens, so each conditional sums to one over the
//! vocabulary by induction.

use std::collections::{BTreeSet, HashMap};

use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::symbols::{TokenId, EOS, EPSILON, UNK};

use super::{Distribution, Scorer, ScorerStateId};

#[derive(Debug)]
pub struct NgramLm {
    order: usize,
    k: f64,
    vocab: BTreeSet<TokenId>,
    /// `counts[n - 1]`: occurrence counts of n-grams.
    counts: Vec<HashMap<Vec<TokenId>, u64>>,
    /// `contexts[n - 1]`: total count of n-grams sharing a given
    /// (n-1)-token context; the denominator of the order-n conditional.
    contexts: Vec<HashMap<Vec<TokenId>, u64>>,
    /// Total unigram events (tokens plus one end-of-sentence each).
    total: u64,
    states: HashMap<ScorerStateId, Vec<TokenId>>,
    next: ScorerStateId,
}

/// Trains an [`NgramLm`] of the given order on tokenized sentences.
/// Requires a non-empty corpus, `order >= 1`, and smoothing `k > 0`.
pub fn train_ngram_lm(corpus: &[Vec<TokenId>], order: usize, k: f64) -> Result<NgramLm> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot train on an empty corpus".into()));
    }
    if order < 1 {
        return Err(Error::Invalid("model order must be at least 1".into()));
    }
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Invalid(format!(
            "smoothing constant must be positive, got {k}"
        )));
    }
    let mut vocab: BTreeSet<TokenId> = BTreeSet::from([UNK, EOS]);
    let mut counts = vec![HashMap::new(); order];
    let mut contexts = vec![HashMap::new(); order];
    let mut total = 0u64;
    for sentence in corpus {
        if sentence.contains(&EPSILON) {
            return Err(Error::Invalid("epsilon token in training corpus".into()));
        }
        vocab.extend(sentence.iter().copied());
        let mut events = sentence.clone();
        events.push(EOS);
        total += events.len() as u64;
        for n in 1..=order {
            for window in events.windows(n) {
                *counts[n - 1].entry(window.to_vec()).or_insert(0) += 1;
                *contexts[n - 1]
                    .entry(window[..n - 1].to_vec())
                    .or_insert(0) += 1;
            }
        }
    }
    Ok(NgramLm {
        order,
        k,
        vocab,
        counts,
        contexts,
        total,
        states: HashMap::new(),
        next: 0,
    })
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Conditional probability of `w` given the last tokens of `history`;
    /// uses the highest order the history supports.
    pub fn prob(&self, history: &[TokenId], w: TokenId) -> f64 {
        let n = self.order.min(history.len() + 1);
        self.prob_order(n, &history[history.len() - (n - 1)..], w)
    }

    fn prob_order(&self, n: usize, ctx: &[TokenId], w: TokenId) -> f64 {
        debug_assert_eq!(ctx.len(), n - 1);
        let v = self.vocab.len() as f64;
        if n == 1 {
            let c = self.counts[0].get([w].as_slice()).copied().unwrap_or(0);
            return (c as f64 + self.k) / (self.total as f64 + self.k * v);
        }
        let mut key: SmallVec<[TokenId; 8]> = SmallVec::from_slice(ctx);
        key.push(w);
        let c = self.counts[n - 1].get(key.as_slice()).copied().unwrap_or(0);
        let ctx_total = self.contexts[n - 1].get(ctx).copied().unwrap_or(0);
        let lower = self.prob_order(n - 1, &ctx[1..], w);
        (c as f64 + self.k * v * lower) / (ctx_total as f64 + self.k * v)
    }

    fn fresh(&mut self, history: Vec<TokenId>) -> ScorerStateId {
        let id = self.next;
        self.next += 1;
        self.states.insert(id, history);
        id
    }

    fn history(&self, state: ScorerStateId) -> Result<&Vec<TokenId>> {
        self.states
            .get(&state)
            .ok_or_else(|| Error::Invalid(format!("unknown or freed scorer state {state}")))
    }
}

impl Scorer for NgramLm {
    fn vocab(&self) -> Option<&BTreeSet<TokenId>> {
        Some(&self.vocab)
    }

    fn start(&mut self, _source: &[TokenId]) -> Result<ScorerStateId> {
        Ok(self.fresh(Vec::new()))
    }

    fn distribution(&mut self, state: ScorerStateId) -> Result<Distribution> {
        let history = self.history(state)?.clone();
        let entries: Vec<(TokenId, f64)> = self
            .vocab
            .iter()
            .map(|&w| (w, self.prob(&history, w).ln()))
            .collect();
        let default = self.prob(&history, UNK).ln();
        Distribution::new(entries, default)
    }

    fn advance(&mut self, state: ScorerStateId, token: TokenId) -> Result<ScorerStateId> {
        let token = self.map_token(token);
        let mut history = self.history(state)?.clone();
        history.push(token);
        // Only the last order-1 tokens condition anything.
        if history.len() >= self.order && self.order >= 1 {
            let cut = history.len() - (self.order - 1);
            history.drain(..cut);
        }
        Ok(self.fresh(history))
    }

    fn free(&mut self, state: ScorerStateId) -> Result<()> {
        self.history(state)?;
        self.states.remove(&state);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::SymbolTable;

    fn ids(symbols: &mut SymbolTable, line: &str) -> Vec<TokenId> {
        symbols.intern_line(line).unwrap()
    }

    #[test]
    fn unigram_probability_matches_hand_computation() {
        // Corpus "a a b": events a, a, b, </s>, so N = 4 and the
        // vocabulary is {a, b, <unk>, </s>}, |V| = 4. With k = 1:
        // P(a) = (2 + 1) / (4 + 4) = 0.375.
        let mut symbols = SymbolTable::new();
        let corpus = vec![ids(&mut symbols, "a a b")];
        let lm = train_ngram_lm(&corpus, 1, 1.0).unwrap();
        let a = symbols.get("a").unwrap();
        assert!((lm.prob(&[], a) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn bigram_conditional_sharpens_as_k_vanishes() {
        let mut symbols = SymbolTable::new();
        let corpus: Vec<Vec<TokenId>> =
            (0..10).map(|_| ids(&mut symbols, "a b")).collect();
        let a = symbols.get("a").unwrap();
        let b = symbols.get("b").unwrap();
        let lm = train_ngram_lm(&corpus, 2, 1e-9).unwrap();
        let p = lm.prob(&[a], b);
        assert!(p > 0.999_999, "P(b | a) should approach 1, got {p}");
    }

    #[test]
    fn distributions_sum_to_one_at_every_order() {
        let mut symbols = SymbolTable::new();
        let corpus = vec![
            ids(&mut symbols, "a b c a b"),
            ids(&mut symbols, "b c a"),
            ids(&mut symbols, "c"),
        ];
        let mut lm = train_ngram_lm(&corpus, 3, 0.4).unwrap();
        let a = symbols.get("a").unwrap();
        let b = symbols.get("b").unwrap();
        for history in [vec![], vec![a], vec![a, b], vec![b, b, a]] {
            let total: f64 = lm
                .vocab()
                .unwrap()
                .iter()
                .map(|&w| lm.prob(&history, w))
                .sum();
            assert!(
                (total - 1.0).abs() < 1e-12,
                "history {history:?} sums to {total}"
            );
            let state = lm.start(&[]).unwrap();
            let mut at = state;
            for &t in &history {
                let next = lm.advance(at, t).unwrap();
                lm.free(at).unwrap();
                at = next;
            }
            let dist = lm.distribution(at).unwrap();
            assert!((dist.explicit_mass() - 1.0).abs() < 1e-12);
            lm.free(at).unwrap();
        }
    }

    #[test]
    fn advance_maps_oov_to_unk() {
        let mut symbols = SymbolTable::new();
        let corpus = vec![ids(&mut symbols, "a b")];
        let mut lm = train_ngram_lm(&corpus, 2, 0.5).unwrap();
        let state = lm.start(&[]).unwrap();
        let next = lm.advance(state, 9999).unwrap();
        assert_eq!(lm.states[&next], vec![UNK]);
    }

    #[test]
    fn unseen_contexts_back_off_to_lower_orders() {
        let mut symbols = SymbolTable::new();
        let corpus = vec![ids(&mut symbols, "a b"), ids(&mut symbols, "b c")];
        let lm = train_ngram_lm(&corpus, 2, 0.5).unwrap();
        let c = symbols.get("c").unwrap();
        // The unknown token never occurs in training, so the context has
        // zero count and the conditional is exactly the unigram.
        let p = lm.prob(&[UNK], c);
        assert!((p - lm.prob(&[], c)).abs() < 1e-12);
    }

    #[test]
    fn training_rejects_bad_inputs() {
        assert!(train_ngram_lm(&[], 2, 0.5).is_err());
        assert!(train_ngram_lm(&[vec![3]], 0, 0.5).is_err());
        assert!(train_ngram_lm(&[vec![3]], 2, 0.0).is_err());
        assert!(train_ngram_lm(&[vec![EPSILON]], 2, 0.5).is_err());
    }

    #[test]
    fn sequence_logprob_decomposes_stepwise() {
        let mut symbols = SymbolTable::new();
        let corpus = vec![
            ids(&mut symbols, "a b c"),
            ids(&mut symbols, "a b"),
            ids(&mut symbols, "c c a"),
        ];
        let mut lm = train_ngram_lm(&corpus, 3, 0.3).unwrap();
        let seq = ids(&mut symbols, "a b c");
        let whole = super::super::sequence_logprob(&mut lm, &[], &seq).unwrap();
        let mut manual = 0.0;
        for t in 0..seq.len() {
            manual += lm.prob(&seq[..t], seq[t]).ln();
        }
        manual += lm.prob(&seq, EOS).ln();
        assert!((whole - manual).abs() < 1e-12, "{whole} vs {manual}");
        assert!(lm.states.is_empty(), "all states must be freed");
    }
}
