//! Uniform scorer: equal probability over a fixed vocabulary.
//!
//! The simplest stand-in for a sequence model, and the reference point
//! for worked examples: with it, the scorer term of the combined score is
//! just `-|y| * ln |V|` (counting the end-of-sentence step).

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::symbols::{TokenId, EOS, EPSILON};

use super::{Distribution, Scorer, ScorerStateId};

#[derive(Debug)]
pub struct UniformScorer {
    vocab: BTreeSet<TokenId>,
    /// Live states; the history is irrelevant for a context-free scorer,
    /// but the lifecycle contract is enforced all the same.
    live: HashMap<ScorerStateId, ()>,
    next: ScorerStateId,
}

impl UniformScorer {
    /// Uniform scorer over `tokens` plus the end-of-sentence token, which
    /// every scorer must price. Epsilon is dropped if present.
    pub fn new(tokens: impl IntoIterator<Item = TokenId>) -> Self {
        let mut vocab: BTreeSet<TokenId> = tokens.into_iter().collect();
        vocab.remove(&EPSILON);
        vocab.insert(EOS);
        UniformScorer {
            vocab,
            live: HashMap::new(),
            next: 0,
        }
    }

    fn logprob(&self) -> f64 {
        -(self.vocab.len() as f64).ln()
    }

    fn fresh(&mut self) -> ScorerStateId {
        let id = self.next;
        self.next += 1;
        self.live.insert(id, ());
        id
    }

    fn check(&self, state: ScorerStateId) -> Result<()> {
        if self.live.contains_key(&state) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("unknown or freed scorer state {state}")))
        }
    }
}

impl Scorer for UniformScorer {
    fn vocab(&self) -> Option<&BTreeSet<TokenId>> {
        Some(&self.vocab)
    }

    fn start(&mut self, _source: &[TokenId]) -> Result<ScorerStateId> {
        Ok(self.fresh())
    }

    fn distribution(&mut self, state: ScorerStateId) -> Result<Distribution> {
        self.check(state)?;
        let lp = self.logprob();
        Distribution::new(self.vocab.iter().map(|&t| (t, lp)).collect(), lp)
    }

    fn advance(&mut self, state: ScorerStateId, _token: TokenId) -> Result<ScorerStateId> {
        self.check(state)?;
        Ok(self.fresh())
    }

    fn free(&mut self, state: ScorerStateId) -> Result<()> {
        self.check(state)?;
        self.live.remove(&state);
        Ok(())
    }
}
