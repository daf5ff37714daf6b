//! Beam search over the combined score, free to leave the lattice.
//!
//! The search space is every sequence over the candidate vocabulary (the
//! scorer's tokens plus the posterior table's, plus end-of-sentence), not
//! just lattice paths. Candidates are scored left to right: each step
//! adds the stepwise evidence gain and `lambda` times the scorer's log
//! probability for the token; ending adds only the scorer's
//! end-of-sentence term, since evidence counts emitted tokens only.
//!
//! Scorer states follow the contract that makes out-of-process scorers
//! affordable: every live hypothesis holds one state, candidate tokens
//! are priced from the parent's distribution without advancing, only the
//! survivors of pruning advance, and parent states are freed as soon as
//! their survivors have advanced.
//!
//! The search stops early only when no live hypothesis can still beat
//! the best finished one. Per-step score gains can be positive (evidence
//! rewards length), so "a finished hypothesis outscores the live ones"
//! is not a sound stopping rule; instead each live hypothesis is credited
//! with the largest possible gain per remaining step, computed from the
//! table's per-order posterior maxima, and the search stops once even
//! that bound falls short. [`exhaustive_decode`] enumerates the whole
//! space as the oracle the beam must match when it saturates.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mbr::{combined_score, stepwise_gain, MbrWeights};
use crate::posteriors::{PosteriorTable, MAX_ORDER};
use crate::scorer::{Distribution, Scorer, ScorerStateId};
use crate::symbols::{TokenId, EOS, EPSILON};

/// A decoded candidate: its tokens (end-of-sentence not included), both
/// score components, and whether it actually ended with end-of-sentence
/// or was cut off by the length limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub evidence: f64,
    pub scorer_logprob: f64,
    pub complete: bool,
}

impl Hypothesis {
    pub fn combined(&self, lambda: f64) -> f64 {
        combined_score(self.evidence, self.scorer_logprob, lambda)
    }
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    /// Live hypotheses kept per step (and finished ones kept overall).
    pub beam: usize,
    /// Longest candidate in tokens; `None` derives `2 * |source| + 5`.
    pub max_len: Option<usize>,
    /// Scorer weight in the combined score; must be non-negative.
    pub lambda: f64,
    pub weights: MbrWeights,
    /// Cap on scorer-proposed candidate tokens per step (most probable
    /// first). Table tokens and end-of-sentence always stay candidates.
    /// `None` considers the scorer's full explicit support.
    pub candidate_cap: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 20,
            max_len: None,
            lambda: 1.0,
            weights: MbrWeights::default(),
            candidate_cap: None,
        }
    }
}

impl DecodeConfig {
    fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Invalid("beam width must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Invalid(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        self.weights.validate()
    }

    fn effective_max_len(&self, source_len: usize) -> usize {
        self.max_len.unwrap_or(2 * source_len + 5)
    }
}

/// Candidate continuations at one step: the scorer's explicit tokens
/// (optionally capped to the most probable `cap`), every table unigram,
/// and end-of-sentence; never epsilon. Ascending token id order.
fn step_candidates(
    dist: &Distribution,
    table: &PosteriorTable,
    cap: Option<usize>,
) -> Vec<TokenId> {
    let mut set: BTreeSet<TokenId> = match cap {
        Some(k) => dist.top_k(k).into_iter().collect(),
        None => dist.explicit_tokens().into_iter().collect(),
    };
    set.extend(table.unigram_tokens());
    set.insert(EOS);
    set.remove(&EPSILON);
    set.into_iter().collect()
}

/// Full candidate vocabulary of a decoding problem: scorer vocabulary
/// (when known) united with the table's tokens and end-of-sentence.
pub fn candidate_vocab(
    scorer_vocab: Option<&BTreeSet<TokenId>>,
    table: &PosteriorTable,
) -> BTreeSet<TokenId> {
    let mut vocab: BTreeSet<TokenId> = scorer_vocab.cloned().unwrap_or_default();
    vocab.extend(table.unigram_tokens());
    vocab.insert(EOS);
    vocab.remove(&EPSILON);
    vocab
}

/// Largest combined-score gain any single step can contribute: length
/// reward plus the best case of every n-gram order (a negative order
/// weight contributes best at posterior zero), never less than zero
/// because a hypothesis can always stop extending. The scorer term never
/// helps (log probabilities are non-positive and `lambda >= 0`).
fn per_step_gain_bound(table: &PosteriorTable, weights: &MbrWeights) -> f64 {
    let mut bound = weights.length;
    for n in 1..=MAX_ORDER {
        bound += f64::max(0.0, weights.ngram[n - 1] * table.max_posterior(n));
    }
    f64::max(0.0, bound)
}

struct LiveHyp {
    tokens: Vec<TokenId>,
    evidence: f64,
    logprob: f64,
    state: ScorerStateId,
}

struct Expansion {
    parent: usize,
    token: TokenId,
    evidence: f64,
    logprob: f64,
    score: f64,
}

/// Compares candidate sequences `parent ++ [token]` lexicographically
/// without materializing them.
fn cmp_extended(a: (&[TokenId], TokenId), b: (&[TokenId], TokenId)) -> std::cmp::Ordering {
    let left = a.0.iter().copied().chain(std::iter::once(a.1));
    let right = b.0.iter().copied().chain(std::iter::once(b.1));
    left.cmp(right)
}

/// Beam search for the sequences with the highest combined score.
/// Returns finished hypotheses best first (ties: lexicographically
/// smaller token sequence first), at most `beam` of them. When the
/// length limit cuts off every line of search before any end-of-sentence
/// (possible only if a scorer refuses to price it), the single best
/// unfinished hypothesis is returned with `complete: false`.
pub fn beam_decode(
    source: &[TokenId],
    scorer: &mut dyn Scorer,
    table: &PosteriorTable,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let max_len = config.effective_max_len(source.len());
    let gain_bound = per_step_gain_bound(table, &config.weights);

    let mut live = vec![LiveHyp {
        tokens: Vec::new(),
        evidence: 0.0,
        logprob: 0.0,
        state: scorer.start(source)?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut best_unfinished: Option<(f64, Hypothesis)> = None;

    while !live.is_empty() {
        let mut expansions: Vec<Expansion> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let dist = scorer.distribution(hyp.state)?;
            finished.push(Hypothesis {
                tokens: hyp.tokens.clone(),
                evidence: hyp.evidence,
                scorer_logprob: hyp.logprob + dist.logprob(EOS),
                complete: true,
            });
            if hyp.tokens.len() >= max_len {
                continue;
            }
            for token in step_candidates(&dist, table, config.candidate_cap) {
                if token == EOS {
                    continue;
                }
                let evidence =
                    hyp.evidence + stepwise_gain(&hyp.tokens, token, table, &config.weights);
                let logprob = hyp.logprob + dist.logprob(scorer.map_token(token));
                expansions.push(Expansion {
                    parent,
                    token,
                    evidence,
                    logprob,
                    score: combined_score(evidence, logprob, config.lambda),
                });
            }
        }

        finished.sort_by(|a, b| {
            b.combined(config.lambda)
                .partial_cmp(&a.combined(config.lambda))
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        finished.truncate(config.beam);

        expansions.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap().then_with(|| {
                cmp_extended(
                    (&live[a.parent].tokens, a.token),
                    (&live[b.parent].tokens, b.token),
                )
            })
        });
        expansions.truncate(config.beam);

        let mut next_live = Vec::with_capacity(expansions.len());
        for exp in &expansions {
            let parent = &live[exp.parent];
            let state = scorer.advance(parent.state, exp.token)?;
            let mut tokens = Vec::with_capacity(parent.tokens.len() + 1);
            tokens.extend_from_slice(&parent.tokens);
            tokens.push(exp.token);
            next_live.push(LiveHyp {
                tokens,
                evidence: exp.evidence,
                logprob: exp.logprob,
                state,
            });
        }
        for hyp in &live {
            scorer.free(hyp.state)?;
        }
        live = next_live;

        // Fallback bookkeeping: remember the strongest hypothesis ever
        // live, in case nothing can finish.
        for hyp in &live {
            let score = combined_score(hyp.evidence, hyp.logprob, config.lambda);
            if best_unfinished.as_ref().is_none_or(|(s, _)| score > *s) {
                best_unfinished = Some((
                    score,
                    Hypothesis {
                        tokens: hyp.tokens.clone(),
                        evidence: hyp.evidence,
                        scorer_logprob: hyp.logprob,
                        complete: false,
                    },
                ));
            }
        }

        if let Some(best) = finished.first() {
            let best_score = best.combined(config.lambda);
            let beatable = live.iter().any(|hyp| {
                let remaining = (max_len - hyp.tokens.len()) as f64;
                let bound = combined_score(hyp.evidence, hyp.logprob, config.lambda)
                    + remaining * gain_bound;
                bound >= best_score
            });
            if !beatable {
                for hyp in &live {
                    scorer.free(hyp.state)?;
                }
                live.clear();
            }
        }
    }

    if finished.is_empty() {
        let (_, hyp) = best_unfinished
            .ok_or_else(|| Error::Invalid("search produced no hypothesis".into()))?;
        return Ok(vec![hyp]);
    }
    Ok(finished)
}

/// Upper bound on sequences the exhaustive oracle may enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

/// Enumerates every sequence up to the length limit and returns the
/// combined-score argmax (ties: lexicographically smallest sequence).
/// Candidate sets, score accumulation, and tie handling mirror
/// [`beam_decode`] exactly, so a saturating beam must reproduce this
/// result token for token. Fails with [`Error::SearchSpaceTooLarge`]
/// when the space exceeds [`EXHAUSTIVE_LIMIT`].
pub fn exhaustive_decode(
    source: &[TokenId],
    scorer: &mut dyn Scorer,
    table: &PosteriorTable,
    config: &DecodeConfig,
) -> Result<Hypothesis> {
    config.validate()?;
    let max_len = config.effective_max_len(source.len());

    let branching = candidate_vocab(scorer.vocab(), table)
        .len()
        .saturating_sub(1) as u128;
    let mut size: u128 = 0;
    let mut layer: u128 = 1;
    for _ in 0..=max_len {
        size = size.saturating_add(layer);
        layer = layer.saturating_mul(branching);
        if size > EXHAUSTIVE_LIMIT {
            return Err(Error::SearchSpaceTooLarge {
                size,
                limit: EXHAUSTIVE_LIMIT,
            });
        }
    }

    struct Search<'a> {
        scorer: &'a mut dyn Scorer,
        table: &'a PosteriorTable,
        config: &'a DecodeConfig,
        max_len: usize,
        tokens: Vec<TokenId>,
        best: Option<(f64, Hypothesis)>,
    }

    impl Search<'_> {
        fn visit(&mut self, state: ScorerStateId, evidence: f64, logprob: f64) -> Result<()> {
            let dist = self.scorer.distribution(state)?;
            let final_logprob = logprob + dist.logprob(EOS);
            let score = combined_score(evidence, final_logprob, self.config.lambda);
            // Depth-first in ascending token order visits sequences in
            // lexicographic order, so replacing only on a strictly
            // better score keeps the lexicographically smallest argmax.
            if self.best.as_ref().is_none_or(|(s, _)| score > *s) {
                self.best = Some((
                    score,
                    Hypothesis {
                        tokens: self.tokens.clone(),
                        evidence,
                        scorer_logprob: final_logprob,
                        complete: true,
                    },
                ));
            }
            if self.tokens.len() >= self.max_len {
                return Ok(());
            }
            for token in step_candidates(&dist, self.table, self.config.candidate_cap) {
                if token == EOS {
                    continue;
                }
                let child_evidence = evidence
                    + stepwise_gain(&self.tokens, token, self.table, &self.config.weights);
                let child_logprob = logprob + dist.logprob(self.scorer.map_token(token));
                let child = self.scorer.advance(state, token)?;
                self.tokens.push(token);
                let result = self.visit(child, child_evidence, child_logprob);
                self.tokens.pop();
                self.scorer.free(child)?;
                result?;
            }
            Ok(())
        }
    }

    let mut search = Search {
        scorer,
        table,
        config,
        max_len,
        tokens: Vec::new(),
        best: None,
    };
    let root = search.scorer.start(source)?;
    let outcome = search.visit(root, 0.0, 0.0);
    search.scorer.free(root)?;
    outcome?;
    Ok(search.best.expect("the empty sequence is always visited").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posteriors::compute_posterior_table;
    use crate::scorer::{train_ngram_lm, UniformScorer};
    use crate::symbols::SymbolTable;
    use crate::testing;

    fn fixture_setup() -> (PosteriorTable, SymbolTable) {
        let mut symbols = SymbolTable::new();
        let lat = testing::fixture(&mut symbols).normalize_posterior(1.0).unwrap();
        let table = compute_posterior_table(&lat, 4, 0.0).unwrap();
        (table, symbols)
    }

    #[test]
    fn fixture_beam_decode_matches_the_worked_example() {
        let (table, symbols) = fixture_setup();
        let mut scorer = UniformScorer::new(table.unigram_tokens());
        assert_eq!(scorer.vocab().unwrap().len(), 4, "a, b, c, </s>");
        let config = DecodeConfig {
            max_len: Some(2),
            ..DecodeConfig::default()
        };
        let results = beam_decode(&[], &mut scorer, &table, &config).unwrap();
        let best = &results[0];
        assert_eq!(symbols.render(&best.tokens).unwrap(), "a b");
        assert!(best.complete);
        assert!(
            (best.combined(config.lambda) - 0.0411).abs() < 1e-4,
            "combined score should be ~0.0411, got {}",
            best.combined(config.lambda)
        );
        assert!((best.evidence - 4.20002).abs() < 1e-4);
    }

    #[test]
    fn results_are_ranked_by_combined_score() {
        let (table, _) = fixture_setup();
        let mut scorer = UniformScorer::new(table.unigram_tokens());
        let config = DecodeConfig {
            max_len: Some(2),
            ..DecodeConfig::default()
        };
        let results = beam_decode(&[], &mut scorer, &table, &config).unwrap();
        assert!(results.len() > 1);
        for pair in results.windows(2) {
            assert!(
                pair[0].combined(config.lambda) >= pair[1].combined(config.lambda),
                "results must be sorted best first"
            );
        }
        assert!(results.iter().all(|h| h.complete));
    }

    #[test]
    fn saturating_beam_matches_the_exhaustive_oracle() {
        for seed in 0..15 {
            let lat = testing::random_lattice(seed).normalize_posterior(1.0).unwrap();
            let table = compute_posterior_table(&lat, 4, 0.1).unwrap();
            let corpus: Vec<Vec<TokenId>> = lat
                .enumerate_paths(10_000)
                .unwrap()
                .into_iter()
                .map(|p| p.tokens)
                .collect();
            let mut lm = train_ngram_lm(&corpus, 2, 0.5).unwrap();
            let config = DecodeConfig {
                beam: 100_000,
                max_len: Some(4),
                lambda: 0.7,
                ..DecodeConfig::default()
            };
            let beam = beam_decode(&[], &mut lm, &table, &config).unwrap();
            let oracle = exhaustive_decode(&[], &mut lm, &table, &config).unwrap();
            assert_eq!(
                beam[0].tokens, oracle.tokens,
                "seed {seed}: beam {:?} vs oracle {:?}",
                beam[0], oracle
            );
            assert_eq!(beam[0].combined(config.lambda), oracle.combined(config.lambda));
        }
    }

    #[test]
    fn empty_table_reduces_to_scorer_search_with_length_reward() {
        // With no evidence, the combined score is theta_len * |y| +
        // lambda * logprob; verify against a direct enumeration.
        let mut symbols = SymbolTable::new();
        let corpus = vec![
            symbols.intern_line("a b").unwrap(),
            symbols.intern_line("a").unwrap(),
            symbols.intern_line("b a").unwrap(),
        ];
        let table = PosteriorTable::empty();
        let config = DecodeConfig {
            beam: 10_000,
            max_len: Some(3),
            lambda: 1.0,
            weights: MbrWeights {
                length: 0.3,
                ngram: [1.0; 4],
            },
            ..DecodeConfig::default()
        };
        let mut lm = train_ngram_lm(&corpus, 2, 0.5).unwrap();
        let best = beam_decode(&[], &mut lm, &table, &config).unwrap().remove(0);

        let mut lm2 = train_ngram_lm(&corpus, 2, 0.5).unwrap();
        let vocab: Vec<TokenId> = lm2.vocab().unwrap().iter().copied().collect();
        let mut expect: Option<(f64, Vec<TokenId>)> = None;
        let mut stack: Vec<Vec<TokenId>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            let lp = crate::scorer::sequence_logprob(&mut lm2, &[], &seq).unwrap();
            let score = 0.3 * seq.len() as f64 + lp;
            if expect.as_ref().is_none_or(|(s, _)| score > *s) {
                expect = Some((score, seq.clone()));
            }
            if seq.len() < 3 {
                for &t in vocab.iter().rev() {
                    if t != EOS {
                        let mut ext = seq.clone();
                        ext.push(t);
                        stack.push(ext);
                    }
                }
            }
        }
        let (score, tokens) = expect.unwrap();
        assert_eq!(best.tokens, tokens);
        assert!((best.combined(config.lambda) - score).abs() < 1e-9);
    }

    #[test]
    fn length_limit_caps_hypotheses() {
        let (table, _) = fixture_setup();
        let mut scorer = UniformScorer::new(table.unigram_tokens());
        let config = DecodeConfig {
            max_len: Some(1),
            lambda: 0.0,
            ..DecodeConfig::default()
        };
        let results = beam_decode(&[], &mut scorer, &table, &config).unwrap();
        assert!(results.iter().all(|h| h.tokens.len() <= 1));
    }

    #[test]
    fn default_length_limit_follows_the_source() {
        let config = DecodeConfig::default();
        assert_eq!(config.effective_max_len(4), 13);
        assert_eq!(config.effective_max_len(0), 5);
        let explicit = DecodeConfig {
            max_len: Some(2),
            ..DecodeConfig::default()
        };
        assert_eq!(explicit.effective_max_len(100), 2);
    }

    #[test]
    fn candidate_cap_keeps_table_tokens() {
        let (table, symbols) = fixture_setup();
        // Cap of one: the scorer may only propose its single best token,
        // but a, b, c from the table remain candidates, so the worked
        // example still decodes identically.
        let mut scorer = UniformScorer::new(table.unigram_tokens());
        let config = DecodeConfig {
            max_len: Some(2),
            candidate_cap: Some(1),
            ..DecodeConfig::default()
        };
        let results = beam_decode(&[], &mut scorer, &table, &config).unwrap();
        assert_eq!(symbols.render(&results[0].tokens).unwrap(), "a b");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (table, _) = fixture_setup();
        let mut scorer = UniformScorer::new(table.unigram_tokens());
        let bad_beam = DecodeConfig {
            beam: 0,
            ..DecodeConfig::default()
        };
        assert!(beam_decode(&[], &mut scorer, &table, &bad_beam).is_err());
        let bad_lambda = DecodeConfig {
            lambda: -0.5,
            ..DecodeConfig::default()
        };
        assert!(beam_decode(&[], &mut scorer, &table, &bad_lambda).is_err());
    }

    #[test]
    fn exhaustive_space_guard_trips_on_large_vocabularies() {
        let (table, _) = fixture_setup();
        let mut scorer = UniformScorer::new(3..200);
        let config = DecodeConfig {
            max_len: Some(10),
            ..DecodeConfig::default()
        };
        match exhaustive_decode(&[], &mut scorer, &table, &config) {
            Err(Error::SearchSpaceTooLarge { .. }) => {}
            other => panic!("expected search-space guard, got {other:?}"),
        }
    }

    /// Wrapper that audits the state lifecycle: every started or advanced
    /// state must be freed exactly once, and only states that survived
    /// pruning may be advanced.
    struct Audit<S: Scorer> {
        inner: S,
        outstanding: std::collections::HashSet<ScorerStateId>,
        advances: usize,
    }

    impl<S: Scorer> Scorer for Audit<S> {
        fn vocab(&self) -> Option<&BTreeSet<TokenId>> {
            self.inner.vocab()
        }
        fn start(&mut self, source: &[TokenId]) -> Result<ScorerStateId> {
            let id = self.inner.start(source)?;
            self.outstanding.insert(id);
            Ok(id)
        }
        fn distribution(&mut self, state: ScorerStateId) -> Result<Distribution> {
            assert!(self.outstanding.contains(&state), "distribution on freed state");
            self.inner.distribution(state)
        }
        fn advance(&mut self, state: ScorerStateId, token: TokenId) -> Result<ScorerStateId> {
            assert!(self.outstanding.contains(&state), "advance on freed state");
            self.advances += 1;
            let id = self.inner.advance(state, token)?;
            self.outstanding.insert(id);
            Ok(id)
        }
        fn free(&mut self, state: ScorerStateId) -> Result<()> {
            assert!(self.outstanding.remove(&state), "double free of {state}");
            self.inner.free(state)
        }
    }

    #[test]
    fn decoder_frees_every_state_and_advances_only_survivors() {
        let (table, _) = fixture_setup();
        let config = DecodeConfig {
            beam: 3,
            max_len: Some(4),
            ..DecodeConfig::default()
        };
        let mut audit = Audit {
            inner: UniformScorer::new(table.unigram_tokens()),
            outstanding: std::collections::HashSet::new(),
            advances: 0,
        };
        beam_decode(&[], &mut audit, &table, &config).unwrap();
        assert!(audit.outstanding.is_empty(), "states leaked: {:?}", audit.outstanding);
        // At most beam survivors advance per step.
        assert!(
            audit.advances <= config.beam * 4,
            "advanced {} times, expected at most {}",
            audit.advances,
            config.beam * 4
        );
    }
}
