//! Sequence scorers: left-to-right models that assign log probabilities
//! to token continuations.
//!
//! A scorer is stateful by contract because the expensive implementations
//! live out of process: `start` opens a sentence and returns a state id,
//! `distribution` asks for the next-token distribution at a state,
//! `advance` extends a state by one token, and `free` releases a state
//! that will not be extended further. In-process scorers follow the same
//! lifecycle so the decoder drives every implementation identically.
//!
//! Out-of-vocabulary tokens map to the unknown token at the scorer
//! boundary: `advance` maps before updating context, and lookups outside
//! a distribution's explicit support fall back to its default log
//! probability, which plays the same role for peers that never reveal
//! their vocabulary.

mod ensemble;
mod external;
mod ngram_lm;
mod uniform;

pub use ensemble::{ensemble_distribution, EnsembleScorer};
pub use external::{ExternalScorer, DEFAULT_TIMEOUT};
pub use ngram_lm::{train_ngram_lm, NgramLm};
pub use uniform::UniformScorer;

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::symbols::{TokenId, EOS, UNK};

/// Opaque scorer state handle. For external scorers this is the peer's
/// own id, passed through unchanged.
pub type ScorerStateId = u64;

/// Sparse next-token distribution: explicit log probabilities for some
/// tokens plus a default for everything else. The default is how a
/// scorer prices tokens it has no opinion about (for in-process scorers
/// it equals the unknown token's log probability).
#[derive(Debug, Clone)]
pub struct Distribution {
    logprobs: HashMap<TokenId, f64>,
    default_logprob: f64,
}

impl Distribution {
    /// Builds a distribution. Log probabilities must lie in `[-inf, 0]`;
    /// values within rounding slop above zero (renormalization residue)
    /// are clamped, anything larger is rejected. A non-positive bound is
    /// what makes the decoder's stopping rule admissible.
    pub fn new(entries: Vec<(TokenId, f64)>, default_logprob: f64) -> Result<Self> {
        let check = |lp: f64, what: &dyn Fn() -> String| -> Result<f64> {
            if lp.is_nan() || lp > 1e-9 {
                return Err(Error::Invalid(format!(
                    "log probability {lp} {} is not in [-inf, 0]",
                    what()
                )));
            }
            Ok(lp.min(0.0))
        };
        let mut logprobs = HashMap::with_capacity(entries.len());
        for (token, lp) in entries {
            let lp = check(lp, &|| format!("for token {token}"))?;
            if logprobs.insert(token, lp).is_some() {
                return Err(Error::Invalid(format!(
                    "token {token} appears twice in a distribution"
                )));
            }
        }
        let default_logprob = check(default_logprob, &|| "as the default".to_string())?;
        Ok(Distribution {
            logprobs,
            default_logprob,
        })
    }

    /// Log probability of `token`: explicit entry or the default.
    pub fn logprob(&self, token: TokenId) -> f64 {
        self.logprobs
            .get(&token)
            .copied()
            .unwrap_or(self.default_logprob)
    }

    pub fn default_logprob(&self) -> f64 {
        self.default_logprob
    }

    /// Tokens with explicit entries, ascending by id.
    pub fn explicit_tokens(&self) -> Vec<TokenId> {
        let mut tokens: Vec<TokenId> = self.logprobs.keys().copied().collect();
        tokens.sort_unstable();
        tokens
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    /// The `k` most probable explicit tokens; ties break toward smaller
    /// ids so the cut is deterministic.
    pub fn top_k(&self, k: usize) -> Vec<TokenId> {
        let mut tokens: Vec<(TokenId, f64)> =
            self.logprobs.iter().map(|(&t, &lp)| (t, lp)).collect();
        tokens.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        tokens.truncate(k);
        tokens.into_iter().map(|(t, _)| t).collect()
    }

    /// Total probability mass of the explicit entries.
    pub fn explicit_mass(&self) -> f64 {
        self.logprobs.values().map(|lp| lp.exp()).sum()
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.logprobs.iter().map(|(&t, &lp)| (t, lp))
    }
}

pub trait Scorer {
    /// The fixed vocabulary this scorer distributes mass over, or `None`
    /// when it is unknown (external peers). Used for OOV mapping and for
    /// building candidate sets.
    fn vocab(&self) -> Option<&BTreeSet<TokenId>>;

    /// Opens a new sentence with the given source tokens and returns the
    /// scorer state before any target token.
    fn start(&mut self, source: &[TokenId]) -> Result<ScorerStateId>;

    /// Next-token distribution at `state`. Does not consume the state.
    fn distribution(&mut self, state: ScorerStateId) -> Result<Distribution>;

    /// State reached from `state` by the token (after OOV mapping).
    fn advance(&mut self, state: ScorerStateId, token: TokenId) -> Result<ScorerStateId>;

    /// Releases a state that will not be used again.
    fn free(&mut self, state: ScorerStateId) -> Result<()>;

    /// Image of `token` under OOV mapping: unchanged if the vocabulary is
    /// unknown or contains it, the unknown token otherwise.
    fn map_token(&self, token: TokenId) -> TokenId {
        match self.vocab() {
            Some(vocab) if !vocab.contains(&token) => UNK,
            _ => token,
        }
    }
}

/// Log probability of a full target sequence plus end-of-sentence, by
/// chaining `distribution`/`advance` from a fresh sentence state. All
/// intermediate states are freed.
pub fn sequence_logprob(
    scorer: &mut dyn Scorer,
    source: &[TokenId],
    tokens: &[TokenId],
) -> Result<f64> {
    let mut state = scorer.start(source)?;
    let mut total = 0.0;
    for &token in tokens {
        let dist = scorer.distribution(state)?;
        total += dist.logprob(scorer.map_token(token));
        let next = scorer.advance(state, token)?;
        scorer.free(state)?;
        state = next;
    }
    let dist = scorer.distribution(state)?;
    total += dist.logprob(EOS);
    scorer.free(state)?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_falls_back_to_the_default() {
        let dist = Distribution::new(vec![(3, -0.5), (4, -1.5)], -9.0).unwrap();
        assert_eq!(dist.logprob(3), -0.5);
        assert_eq!(dist.logprob(99), -9.0);
        assert_eq!(dist.explicit_tokens(), vec![3, 4]);
    }

    #[test]
    fn distribution_rejects_duplicates_and_out_of_range_values() {
        assert!(Distribution::new(vec![(3, -0.5), (3, -0.6)], -9.0).is_err());
        assert!(Distribution::new(vec![(3, f64::NAN)], -9.0).is_err());
        assert!(Distribution::new(vec![], f64::INFINITY).is_err());
        assert!(Distribution::new(vec![(3, 0.25)], -9.0).is_err(), "positive logprob");
        let clamped = Distribution::new(vec![(3, 1e-12)], -9.0).unwrap();
        assert_eq!(clamped.logprob(3), 0.0, "rounding residue clamps to zero");
        assert!(
            Distribution::new(vec![(3, f64::NEG_INFINITY)], -9.0).is_ok(),
            "impossible tokens are expressible"
        );
    }

    #[test]
    fn top_k_breaks_ties_by_id() {
        let dist = Distribution::new(vec![(5, -1.0), (3, -1.0), (4, -0.5)], -9.0).unwrap();
        assert_eq!(dist.top_k(2), vec![4, 3]);
        assert_eq!(dist.top_k(10), vec![4, 3, 5]);
    }

    #[test]
    fn sequence_logprob_chains_step_scores() {
        let mut scorer = UniformScorer::new([3, 4, 5]);
        // Four tokens in the vocabulary (three given plus </s>), so each
        // step costs -ln 4 and a two-token sequence plus </s> costs three
        // steps.
        let lp = sequence_logprob(&mut scorer, &[], &[3, 4]).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-12, "got {lp}");
    }
}
