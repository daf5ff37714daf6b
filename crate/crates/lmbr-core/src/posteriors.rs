//! N-gram path posteriors.
//!
//! The posterior of an n-gram `u` is the total probability of lattice
//! paths that contain `u` as a contiguous subsequence at least once.
//! Counting "at least once" (rather than expected counts) is what makes
//! the quantity a posterior: it lies in `[0, 1]` and equals an indicator
//! expectation under the path distribution.
//!
//! The efficient computation intersects the lattice with a pattern
//! automaton for `u` and measures the mass that *avoids* the match state;
//! the posterior is one minus that. With a normalized input lattice every
//! intermediate quantity is a probability in `[0, 1]`, so the forward
//! pass runs in plain probability space. [`posterior_bruteforce`] is the
//! independent oracle: enumerate all paths and add up the ones containing
//! the pattern.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::lattice::{ForwardPlan, Lattice};
use crate::symbols::{SymbolTable, TokenId, EPSILON};

/// Highest n-gram order the evidence combination uses.
pub const MAX_ORDER: usize = 4;

/// Safety bound on distinct n-grams collected from one lattice.
pub const NGRAM_LIMIT: usize = 10_000_000;

/// An n-gram of 1 to [`MAX_ORDER`] token ids, stored inline.
pub type Ngram = SmallVec<[TokenId; MAX_ORDER]>;

/// Tolerance for the "is this lattice normalized?" precondition check.
const MASS_TOLERANCE: f64 = 1e-6;

fn require_normalized(lattice: &Lattice) -> Result<()> {
    let mass = lattice.total_mass();
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::Invalid(format!(
            "lattice is not normalized (total mass {mass}); apply normalize_posterior first"
        )));
    }
    Ok(())
}

fn require_valid_pattern(pattern: &[TokenId]) -> Result<()> {
    if pattern.is_empty() {
        return Err(Error::Invalid("empty n-gram pattern".into()));
    }
    if pattern.contains(&EPSILON) {
        return Err(Error::Invalid("epsilon token in n-gram pattern".into()));
    }
    Ok(())
}

/// Failure-function automaton for one pattern. State `q` means "the last
/// `q` tokens read are the longest prefix of the pattern that is a suffix
/// of the input"; reaching `q = len` is a match.
struct PatternAutomaton<'a> {
    pattern: &'a [TokenId],
    fail: SmallVec<[usize; MAX_ORDER]>,
}

impl<'a> PatternAutomaton<'a> {
    fn new(pattern: &'a [TokenId]) -> Self {
        let mut fail: SmallVec<[usize; MAX_ORDER]> = SmallVec::with_capacity(pattern.len());
        fail.push(0);
        let mut k = 0;
        for i in 1..pattern.len() {
            while k > 0 && pattern[i] != pattern[k] {
                k = fail[k - 1];
            }
            if pattern[i] == pattern[k] {
                k += 1;
            }
            fail.push(k);
        }
        PatternAutomaton { pattern, fail }
    }

    /// Next state after reading `token` in state `q < len`.
    fn step(&self, mut q: usize, token: TokenId) -> usize {
        loop {
            if self.pattern[q] == token {
                return q + 1;
            }
            if q == 0 {
                return 0;
            }
            q = self.fail[q - 1];
        }
    }
}

/// Mass of paths that avoid `pattern`, via a forward pass over the
/// product of the lattice and the pattern automaton. Transitions into the
/// match state are dropped, so surviving mass is exactly the avoiding
/// mass.
fn avoiding_mass(plan: &ForwardPlan, pattern: &[TokenId]) -> f64 {
    let automaton = PatternAutomaton::new(pattern);
    let m = pattern.len();
    // forward[state * (m + 1) + q]: mass reaching `state` with automaton
    // state `q`. Row m is unused (matches are dropped) but keeps indexing
    // uniform.
    let mut forward = vec![0.0f64; plan.num_states * (m + 1)];
    forward[plan.start * (m + 1)] = 1.0;
    for &(src, dst, label, prob) in &plan.arcs {
        for q in 0..m {
            let mass = forward[src * (m + 1) + q];
            if mass == 0.0 {
                continue;
            }
            let next = automaton.step(q, label);
            if next < m {
                forward[dst * (m + 1) + next] += mass * prob;
            }
        }
    }
    let mut avoided = 0.0;
    for &(state, prob) in &plan.finals {
        for q in 0..m {
            avoided += forward[state * (m + 1) + q] * prob;
        }
    }
    avoided
}

fn posterior_from_plan(plan: &ForwardPlan, pattern: &[TokenId]) -> f64 {
    (1.0 - avoiding_mass(plan, pattern)).clamp(0.0, 1.0)
}

/// Posterior of one n-gram: the probability mass of paths containing
/// `pattern` at least once. Requires a normalized lattice.
pub fn ngram_path_posterior(lattice: &Lattice, pattern: &[TokenId]) -> Result<f64> {
    require_normalized(lattice)?;
    require_valid_pattern(pattern)?;
    Ok(posterior_from_plan(&lattice.forward_plan(), pattern))
}

/// Oracle for [`ngram_path_posterior`]: enumerate every path and sum the
/// probabilities of those containing `pattern`. Only viable on small
/// lattices; fails once the path count passes `max_paths`.
pub fn posterior_bruteforce(
    lattice: &Lattice,
    pattern: &[TokenId],
    max_paths: u64,
) -> Result<f64> {
    require_normalized(lattice)?;
    require_valid_pattern(pattern)?;
    let mut total = 0.0;
    for path in lattice.enumerate_paths(max_paths)? {
        if path.tokens.windows(pattern.len()).any(|w| w == pattern) {
            total += path.prob;
        }
    }
    Ok(total)
}

/// Every distinct n-gram of order `1..=max_order` appearing on some path,
/// collected by propagating bounded histories through the lattice in
/// topological order. Fails with [`Error::TooManyNgrams`] past
/// [`NGRAM_LIMIT`].
pub fn collect_ngrams(lattice: &Lattice, max_order: usize) -> Result<BTreeSet<Ngram>> {
    if !(1..=MAX_ORDER).contains(&max_order) {
        return Err(Error::Invalid(format!(
            "max_order must be in 1..={MAX_ORDER}, got {max_order}"
        )));
    }
    let plan = lattice.forward_plan();
    // Histories are the distinct suffixes of length < max_order over all
    // partial paths into a state; extending each by an arc label yields
    // every n-gram ending on that arc.
    type History = SmallVec<[TokenId; MAX_ORDER]>;
    let mut histories: Vec<BTreeSet<History>> = vec![BTreeSet::new(); plan.num_states];
    histories[plan.start].insert(History::new());
    let mut ngrams = BTreeSet::new();
    let mut history_count = 1usize;
    for &(src, dst, label, _) in &plan.arcs {
        // Split borrow: histories[src] is read while histories[dst] grows.
        let (src_set, dst_set) = if src < dst {
            let (a, b) = histories.split_at_mut(dst);
            (&a[src], &mut b[0])
        } else {
            let (a, b) = histories.split_at_mut(src);
            (&b[0], &mut a[dst])
        };
        for history in src_set {
            let mut extended = history.clone();
            extended.push(label);
            for n in 1..=extended.len().min(max_order) {
                let ngram: Ngram = SmallVec::from_slice(&extended[extended.len() - n..]);
                ngrams.insert(ngram);
                if ngrams.len() > NGRAM_LIMIT {
                    return Err(Error::TooManyNgrams { limit: NGRAM_LIMIT });
                }
            }
            if extended.len() >= max_order {
                extended.remove(0);
            }
            if dst_set.insert(extended) {
                history_count += 1;
                if history_count > NGRAM_LIMIT {
                    return Err(Error::TooManyNgrams { limit: NGRAM_LIMIT });
                }
            }
        }
    }
    Ok(ngrams)
}

/// Mixes a posterior with the uniform value 1/2: `(1 - alpha) * p +
/// alpha * 0.5`. Applied to collected n-grams only; absent n-grams keep
/// posterior zero.
pub fn smooth_posterior(p: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * p + alpha * 0.5
}

/// Smoothed posteriors for every n-gram of a normalized lattice, plus the
/// provenance needed to reproduce the table (`max_order`, `alpha`, the
/// `beta` used during normalization, and an optional source lattice hash).
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    entries: HashMap<Ngram, f64>,
    max_order: usize,
    alpha: f64,
    beta: f64,
    source_hash: Option<String>,
    /// Largest stored posterior per order (index `n - 1`); upper bound
    /// used by the decoder's stopping criterion.
    max_by_order: [f64; MAX_ORDER],
}

impl PosteriorTable {
    fn from_entries(
        entries: HashMap<Ngram, f64>,
        max_order: usize,
        alpha: f64,
        beta: f64,
        source_hash: Option<String>,
    ) -> Self {
        let mut max_by_order = [0.0f64; MAX_ORDER];
        for (ngram, &p) in &entries {
            let slot = &mut max_by_order[ngram.len() - 1];
            *slot = f64::max(*slot, p);
        }
        PosteriorTable {
            entries,
            max_order,
            alpha,
            beta,
            source_hash,
            max_by_order,
        }
    }

    /// Table with no entries: every lookup is zero. Used to reduce the
    /// combined decoder to a pure scorer search.
    pub fn empty() -> Self {
        Self::from_entries(HashMap::new(), MAX_ORDER, 0.0, 1.0, None)
    }

    /// Smoothed posterior of `ngram`; zero when absent.
    pub fn lookup(&self, ngram: &[TokenId]) -> f64 {
        if ngram.is_empty() || ngram.len() > self.max_order {
            return 0.0;
        }
        let key: Ngram = SmallVec::from_slice(ngram);
        self.entries.get(&key).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn source_hash(&self) -> Option<&str> {
        self.source_hash.as_deref()
    }

    /// Records which normalization temperature and source lattice the
    /// table came from; carried into the serialized header.
    pub fn set_provenance(&mut self, beta: f64, source_hash: Option<String>) {
        self.beta = beta;
        self.source_hash = source_hash;
    }

    /// Largest stored posterior of order `n`, zero when none.
    pub fn max_posterior(&self, n: usize) -> f64 {
        if (1..=MAX_ORDER).contains(&n) {
            self.max_by_order[n - 1]
        } else {
            0.0
        }
    }

    /// Distinct tokens appearing in order-1 entries, ascending. These are
    /// the lattice's own tokens, which the decoder must always consider.
    pub fn unigram_tokens(&self) -> BTreeSet<TokenId> {
        self.entries
            .iter()
            .filter(|(ngram, _)| ngram.len() == 1)
            .map(|(ngram, _)| ngram[0])
            .collect()
    }

    /// Entries sorted by n-gram id sequence, for deterministic output.
    pub fn sorted_entries(&self) -> Vec<(&Ngram, f64)> {
        let mut rows: Vec<_> = self.entries.iter().map(|(k, &v)| (k, v)).collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        rows
    }

    /// Serializes as header comments (`# key value`) followed by one
    /// `tokens<TAB>posterior` row per n-gram, posteriors with nine
    /// decimals, rows sorted by token ids.
    pub fn to_text(&self, symbols: &SymbolTable) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "# max_order {}", self.max_order).unwrap();
        writeln!(out, "# alpha {:.6}", self.alpha).unwrap();
        writeln!(out, "# beta {:.6}", self.beta).unwrap();
        if let Some(hash) = &self.source_hash {
            writeln!(out, "# lattice {hash}").unwrap();
        }
        for (ngram, p) in self.sorted_entries() {
            writeln!(out, "{}\t{p:.9}", symbols.render(ngram)?).unwrap();
        }
        Ok(out)
    }

    /// Parses the [`to_text`](Self::to_text) format. Unknown header keys
    /// are ignored as comments; missing headers default to the highest
    /// observed order, `alpha = 0`, `beta = 1`.
    pub fn from_text(text: &str, symbols: &mut SymbolTable) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut max_order = None;
        let mut alpha = 0.0;
        let mut beta = 1.0;
        let mut source_hash = None;
        let mut seen_order = 0;
        for (lineno, raw) in text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse {
                line: lineno + 1,
                message,
            };
            let line = raw.trim_end();
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                let mut fields = comment.split_whitespace();
                match (fields.next(), fields.next()) {
                    (Some("max_order"), Some(v)) => {
                        max_order = Some(v.parse::<usize>().map_err(|_| {
                            parse_err(format!("bad max_order {v:?}"))
                        })?);
                    }
                    (Some("alpha"), Some(v)) => {
                        alpha = v
                            .parse()
                            .map_err(|_| parse_err(format!("bad alpha {v:?}")))?;
                    }
                    (Some("beta"), Some(v)) => {
                        beta = v
                            .parse()
                            .map_err(|_| parse_err(format!("bad beta {v:?}")))?;
                    }
                    (Some("lattice"), Some(v)) => source_hash = Some(v.to_owned()),
                    _ => {}
                }
                continue;
            }
            let (tokens, value) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `tokens<TAB>posterior`".into()))?;
            let ngram: Ngram = tokens
                .split_whitespace()
                .map(|t| symbols.intern(t))
                .collect::<Result<_>>()?;
            if ngram.is_empty() || ngram.len() > MAX_ORDER {
                return Err(parse_err(format!(
                    "n-gram must have 1..={MAX_ORDER} tokens, got {}",
                    ngram.len()
                )));
            }
            let p: f64 = value
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad posterior {value:?}")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(parse_err(format!("posterior {p} outside [0, 1]")));
            }
            seen_order = seen_order.max(ngram.len());
            if entries.insert(ngram, p).is_some() {
                return Err(parse_err(format!("duplicate n-gram {tokens:?}")));
            }
        }
        let max_order = max_order.unwrap_or(seen_order.max(1));
        Ok(Self::from_entries(
            entries,
            max_order,
            alpha,
            beta,
            source_hash,
        ))
    }
}

/// Builds the full posterior table of a normalized lattice: collect every
/// n-gram up to `max_order`, compute each one's path posterior through
/// the pattern-automaton intersection, then smooth with `alpha`.
/// Per-pattern passes are independent and run in parallel.
pub fn compute_posterior_table(
    lattice: &Lattice,
    max_order: usize,
    alpha: f64,
) -> Result<PosteriorTable> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    require_normalized(lattice)?;
    let ngrams: Vec<Ngram> = collect_ngrams(lattice, max_order)?.into_iter().collect();
    let plan = lattice.forward_plan();
    let entries: HashMap<Ngram, f64> = ngrams
        .into_par_iter()
        .map(|ngram| {
            let p = smooth_posterior(posterior_from_plan(&plan, &ngram), alpha);
            (ngram, p)
        })
        .collect();
    Ok(PosteriorTable::from_entries(
        entries, max_order, alpha, 1.0, None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::SymbolTable;
    use crate::testing;

    fn fixture() -> (Lattice, SymbolTable) {
        let mut symbols = SymbolTable::new();
        let lat = testing::fixture(&mut symbols).normalize_posterior(1.0).unwrap();
        (lat, symbols)
    }

    #[test]
    fn fixture_posteriors_match_path_masses() {
        let (lat, mut symbols) = fixture();
        let a = symbols.intern("a").unwrap();
        let b = symbols.intern("b").unwrap();
        let c = symbols.intern("c").unwrap();
        let p = |pat: &[TokenId]| ngram_path_posterior(&lat, pat).unwrap();
        assert!((p(&[a]) - 1.0).abs() < 1e-9, "every path contains a");
        assert!((p(&[b]) - 0.6).abs() < 1e-4);
        assert!((p(&[c]) - 0.4).abs() < 1e-4);
        assert!((p(&[a, b]) - 0.6).abs() < 1e-4);
        assert!((p(&[a, c]) - 0.4).abs() < 1e-4);
        assert_eq!(p(&[b, c]), 0.0, "no path contains b c");
        assert_eq!(p(&[b, a]), 0.0);
    }

    #[test]
    fn repeated_token_patterns_need_the_failure_function() {
        // Paths: "a a b" and "a b". The pattern "a a" must match inside
        // "a a b" even though the second "a" also starts a new candidate
        // match.
        let mut symbols = SymbolTable::new();
        let text = "0 1 a 0.0\n1 2 a 0.6931\n1 3 b 0.6931\n2 3 b 0.0\n3 0.0\n";
        let lat = read(text, &mut symbols);
        let a = symbols.get("a").unwrap();
        let p = ngram_path_posterior(&lat, &[a, a]).unwrap();
        assert!((p - 0.5).abs() < 1e-9, "P(a a) should be 0.5, got {p}");
    }

    fn read(text: &str, symbols: &mut SymbolTable) -> Lattice {
        crate::lattice::read_lattice(text, symbols)
            .unwrap()
            .normalize_posterior(1.0)
            .unwrap()
    }

    #[test]
    fn efficient_and_bruteforce_posteriors_agree_on_random_lattices() {
        for seed in 0..40 {
            let lat = testing::random_lattice(seed).normalize_posterior(1.0).unwrap();
            for ngram in collect_ngrams(&lat, 4).unwrap() {
                let fast = ngram_path_posterior(&lat, &ngram).unwrap();
                let slow = posterior_bruteforce(&lat, &ngram, 1_000_000).unwrap();
                assert!(
                    (fast - slow).abs() < 1e-9,
                    "seed {seed}, ngram {ngram:?}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn posteriors_are_probabilities() {
        for seed in 0..40 {
            let lat = testing::random_lattice(seed).normalize_posterior(1.0).unwrap();
            for ngram in collect_ngrams(&lat, 4).unwrap() {
                let p = ngram_path_posterior(&lat, &ngram).unwrap();
                assert!((0.0..=1.0).contains(&p), "seed {seed}: {p}");
            }
        }
    }

    #[test]
    fn absent_ngrams_have_zero_posterior_even_after_smoothing() {
        let (lat, mut symbols) = fixture();
        let table = compute_posterior_table(&lat, 4, 0.1).unwrap();
        let b = symbols.intern("b").unwrap();
        let c = symbols.intern("c").unwrap();
        assert_eq!(table.lookup(&[b, c]), 0.0);
        assert_eq!(table.lookup(&[]), 0.0);
        assert_eq!(table.lookup(&[b, c, b, c, b]), 0.0, "order above max is zero");
    }

    #[test]
    fn smoothing_mixes_toward_one_half() {
        let (lat, mut symbols) = fixture();
        let a = symbols.intern("a").unwrap();
        let table = compute_posterior_table(&lat, 4, 0.1).unwrap();
        // P(a) = 1 exactly; smoothed: 0.9 * 1 + 0.1 * 0.5 = 0.95.
        assert!((table.lookup(&[a]) - 0.95).abs() < 1e-9);
        let flat = compute_posterior_table(&lat, 4, 1.0).unwrap();
        assert!((flat.lookup(&[a]) - 0.5).abs() < 1e-12, "alpha=1 collapses to uniform");
        let raw = compute_posterior_table(&lat, 4, 0.0).unwrap();
        assert!((raw.lookup(&[a]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixture_collects_five_ngrams() {
        let (lat, mut symbols) = fixture();
        let a = symbols.intern("a").unwrap();
        let b = symbols.intern("b").unwrap();
        let c = symbols.intern("c").unwrap();
        let ngrams = collect_ngrams(&lat, 4).unwrap();
        let want: BTreeSet<Ngram> = [
            vec![a], vec![b], vec![c], vec![a, b], vec![a, c],
        ]
        .into_iter()
        .map(SmallVec::from_vec)
        .collect();
        assert_eq!(ngrams, want);
    }

    #[test]
    fn unnormalized_lattices_are_rejected() {
        let mut symbols = SymbolTable::new();
        let text = "0 1 a 2.0\n1 0.0\n";
        let lat = crate::lattice::read_lattice(text, &mut symbols).unwrap();
        let a = symbols.get("a").unwrap();
        assert!(ngram_path_posterior(&lat, &[a]).is_err());
        assert!(posterior_bruteforce(&lat, &[a], 100).is_err());
        assert!(compute_posterior_table(&lat, 4, 0.0).is_err());
    }

    #[test]
    fn table_round_trips_through_text() {
        let (lat, symbols) = fixture();
        let mut table = compute_posterior_table(&lat, 4, 0.1).unwrap();
        table.set_provenance(1.5, Some("cafe1234".into()));
        let text = table.to_text(&symbols).unwrap();
        let mut symbols2 = symbols.clone();
        let back = PosteriorTable::from_text(&text, &mut symbols2).unwrap();
        assert_eq!(back.max_order(), 4);
        assert!((back.alpha() - 0.1).abs() < 1e-9);
        assert!((back.beta() - 1.5).abs() < 1e-9);
        assert_eq!(back.source_hash(), Some("cafe1234"));
        assert_eq!(back.len(), table.len());
        for (ngram, p) in table.sorted_entries() {
            assert!(
                (back.lookup(ngram) - p).abs() < 1e-9,
                "ngram {ngram:?} changed across round trip"
            );
        }
        assert_eq!(text, back.to_text(&symbols2).unwrap());
    }

    #[test]
    fn table_text_rejects_bad_rows() {
        let mut symbols = SymbolTable::new();
        assert!(PosteriorTable::from_text("a b 0.5\n", &mut symbols).is_err(), "no tab");
        assert!(PosteriorTable::from_text("a\t1.5\n", &mut symbols).is_err(), "out of range");
        assert!(
            PosteriorTable::from_text("a\t0.5\na\t0.4\n", &mut symbols).is_err(),
            "duplicate"
        );
    }

    #[test]
    fn max_posterior_tracks_per_order_maxima() {
        let (lat, mut symbols) = fixture();
        let table = compute_posterior_table(&lat, 4, 0.0).unwrap();
        let a = symbols.intern("a").unwrap();
        assert!((table.max_posterior(1) - table.lookup(&[a])).abs() < 1e-12);
        assert!(table.max_posterior(2) > 0.59);
        assert_eq!(table.max_posterior(3), 0.0, "no trigrams in a two-token lattice");
        assert_eq!(PosteriorTable::empty().max_posterior(1), 0.0);
    }
}
