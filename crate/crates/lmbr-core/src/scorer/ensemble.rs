//! Product-of-experts ensemble over several scorers.
//!
//! Member distributions over the same support are multiplied together
//! (log probabilities summed) and renormalized into a single
//! distribution. Members advance in lockstep: one ensemble state is a
//! tuple of member states.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::symbols::{TokenId, UNK};

use super::{Distribution, Scorer, ScorerStateId};

/// Multiplies distributions together and renormalizes. All inputs must
/// have identical explicit support; the combined default is the sum of
/// the member defaults under the same normalizer (or the unknown token's
/// combined value when it is explicit).
pub fn ensemble_distribution(dists: &[Distribution]) -> Result<Distribution> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Invalid("ensemble of zero distributions".into()))?;
    let support = first.explicit_tokens();
    for (i, dist) in dists.iter().enumerate().skip(1) {
        let other = dist.explicit_tokens();
        if other != support {
            let witness = support
                .iter()
                .find(|t| !other.contains(t))
                .or_else(|| other.iter().find(|t| !support.contains(t)));
            return Err(Error::VocabMismatch {
                message: match witness {
                    Some(token) => {
                        format!("members 0 and {i} disagree on token {token}")
                    }
                    None => format!("members 0 and {i} have different supports"),
                },
            });
        }
    }
    let mut summed: Vec<(TokenId, f64)> = support
        .iter()
        .map(|&t| (t, dists.iter().map(|d| d.logprob(t)).sum()))
        .collect();
    let values: Vec<f64> = summed.iter().map(|&(_, lp)| lp).collect();
    let log_z = log_sum_exp(&values);
    if !log_z.is_finite() {
        return Err(Error::Invalid(
            "ensemble product has no probability mass".into(),
        ));
    }
    for (_, lp) in &mut summed {
        *lp -= log_z;
    }
    let default = match summed.iter().find(|&&(t, _)| t == UNK) {
        Some(&(_, lp)) => lp,
        None => dists.iter().map(|d| d.default_logprob()).sum::<f64>() - log_z,
    };
    Distribution::new(summed, default)
}

pub struct EnsembleScorer {
    members: Vec<Box<dyn Scorer + Send>>,
    states: std::collections::HashMap<ScorerStateId, Vec<ScorerStateId>>,
    next: ScorerStateId,
}

impl EnsembleScorer {
    /// Builds an ensemble. Members that expose a vocabulary must agree on
    /// it exactly; members with unknown vocabularies (external peers) are
    /// checked per distribution instead.
    pub fn new(members: Vec<Box<dyn Scorer + Send>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Invalid("ensemble needs at least one member".into()));
        }
        let mut known: Option<(usize, &BTreeSet<TokenId>)> = None;
        for (i, member) in members.iter().enumerate() {
            if let Some(vocab) = member.vocab() {
                if let Some((j, expected)) = known {
                    if vocab != expected {
                        return Err(Error::VocabMismatch {
                            message: format!(
                                "members {j} and {i} have different vocabularies \
                                 ({} vs {} tokens)",
                                expected.len(),
                                vocab.len()
                            ),
                        });
                    }
                } else {
                    known = Some((i, vocab));
                }
            }
        }
        Ok(EnsembleScorer {
            members,
            states: std::collections::HashMap::new(),
            next: 0,
        })
    }

    fn member_states(&self, state: ScorerStateId) -> Result<Vec<ScorerStateId>> {
        self.states
            .get(&state)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("unknown or freed scorer state {state}")))
    }

    fn fresh(&mut self, members: Vec<ScorerStateId>) -> ScorerStateId {
        let id = self.next;
        self.next += 1;
        self.states.insert(id, members);
        id
    }
}

impl Scorer for EnsembleScorer {
    fn vocab(&self) -> Option<&BTreeSet<TokenId>> {
        self.members.iter().find_map(|m| m.vocab())
    }

    fn start(&mut self, source: &[TokenId]) -> Result<ScorerStateId> {
        let states = self
            .members
            .iter_mut()
            .map(|m| m.start(source))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.fresh(states))
    }

    fn distribution(&mut self, state: ScorerStateId) -> Result<Distribution> {
        let member_states = self.member_states(state)?;
        let dists = self
            .members
            .iter_mut()
            .zip(&member_states)
            .map(|(m, &s)| m.distribution(s))
            .collect::<Result<Vec<_>>>()?;
        ensemble_distribution(&dists)
    }

    fn advance(&mut self, state: ScorerStateId, token: TokenId) -> Result<ScorerStateId> {
        let member_states = self.member_states(state)?;
        let advanced = self
            .members
            .iter_mut()
            .zip(&member_states)
            .map(|(m, &s)| m.advance(s, token))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.fresh(advanced))
    }

    fn free(&mut self, state: ScorerStateId) -> Result<()> {
        let member_states = self.member_states(state)?;
        for (m, &s) in self.members.iter_mut().zip(&member_states) {
            m.free(s)?;
        }
        self.states.remove(&state);
        Ok(())
    }
}
