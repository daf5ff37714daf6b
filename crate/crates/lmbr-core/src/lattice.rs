//! Acyclic weighted lattices over token ids.
//!
//! A lattice is a weighted acyclic automaton: integer states, one start
//! state, weighted final states, and arcs `src --token/weight--> dst`. All
//! weights are negative log probabilities, so lower is better and a path's
//! weight is the sum of its arc weights plus the final weight of its last
//! state. Epsilon labels are forbidden; every arc consumes a real token.
//!
//! Construction always runs the full invariant check (finite weights,
//! acyclicity, a reachable final state), so any `Lattice` value in hand is
//! structurally sound. Operations that need stronger guarantees (full
//! connectivity for posterior normalization) check and report their own
//! preconditions.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::symbols::{SymbolTable, TokenId, EPSILON, EPSILON_STR};

pub type StateId = u32;

/// Single transition. `weight` is a negative log probability contribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub src: StateId,
    pub dst: StateId,
    pub label: TokenId,
    pub weight: f64,
}

/// One complete start-to-final path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub tokens: Vec<TokenId>,
    /// `exp(-(sum of arc weights + final weight))`. Lies in `[0, 1]` and
    /// sums to one over all paths when the lattice is normalized.
    pub prob: f64,
}

/// One hypothesis of an n-best list: a token sequence and its weight in
/// the negative log domain (lower is better).
#[derive(Debug, Clone, PartialEq)]
pub struct NbestEntry {
    pub tokens: Vec<TokenId>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Lattice {
    start: StateId,
    /// All state ids, ascending.
    states: Vec<StateId>,
    /// Final weights by state id, ascending by state.
    finals: Vec<(StateId, f64)>,
    /// Arcs in canonical order: by (src, label, dst, weight bits).
    arcs: Vec<Arc>,
    /// state id -> dense index into `states`.
    index: HashMap<StateId, usize>,
    /// dense index -> indices into `arcs`, preserving canonical order.
    out: Vec<Vec<usize>>,
    /// dense index -> final weight.
    final_w: Vec<Option<f64>>,
    /// Dense indices in topological order (sources before targets).
    topo: Vec<usize>,
}

impl PartialEq for Lattice {
    fn eq(&self, other: &Self) -> bool {
        self.start == other.start && self.finals == other.finals && self.arcs == other.arcs
    }
}

impl Lattice {
    /// Builds a lattice and checks every structural invariant: finite
    /// weights, no epsilon labels, at least one final state, acyclicity,
    /// and a final state reachable from `start`.
    pub fn from_parts(
        start: StateId,
        finals: Vec<(StateId, f64)>,
        arcs: Vec<Arc>,
    ) -> Result<Lattice> {
        if finals.is_empty() {
            return Err(Error::Invalid("lattice has no final state".into()));
        }
        for &(state, weight) in &finals {
            if !weight.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite final weight {weight} at state {state}"
                )));
            }
        }
        for arc in &arcs {
            if !arc.weight.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite weight {} on arc {} -> {}",
                    arc.weight, arc.src, arc.dst
                )));
            }
            if arc.label == EPSILON {
                return Err(Error::Invalid(format!(
                    "epsilon label on arc {} -> {}; epsilon is only legal transiently during conversion",
                    arc.src, arc.dst
                )));
            }
        }

        let mut states: Vec<StateId> = Vec::new();
        states.push(start);
        states.extend(finals.iter().map(|&(s, _)| s));
        states.extend(arcs.iter().flat_map(|a| [a.src, a.dst]));
        states.sort_unstable();
        states.dedup();

        let index: HashMap<StateId, usize> =
            states.iter().enumerate().map(|(i, &s)| (s, i)).collect();

        let mut finals = finals;
        finals.sort_by_key(|&(s, _)| s);
        let mut final_w = vec![None; states.len()];
        for &(state, weight) in &finals {
            let slot = &mut final_w[index[&state]];
            if slot.is_some() {
                return Err(Error::Invalid(format!(
                    "state {state} listed as final more than once"
                )));
            }
            *slot = Some(weight);
        }

        let mut arcs = arcs;
        arcs.sort_by(|a, b| {
            (a.src, a.label, a.dst, a.weight.to_bits())
                .cmp(&(b.src, b.label, b.dst, b.weight.to_bits()))
        });
        let mut out = vec![Vec::new(); states.len()];
        for (i, arc) in arcs.iter().enumerate() {
            out[index[&arc.src]].push(i);
        }

        let topo = toposort(&states, &index, &arcs, &out)?;

        let lattice = Lattice {
            start,
            states,
            finals,
            arcs,
            index,
            out,
            final_w,
            topo,
        };

        let accessible = lattice.accessible();
        if !lattice
            .finals
            .iter()
            .any(|&(s, _)| accessible[lattice.index[&s]])
        {
            return Err(Error::Invalid(
                "start state cannot reach any final state".into(),
            ));
        }
        Ok(lattice)
    }

    pub fn start(&self) -> StateId {
        self.start
    }

    /// All state ids, ascending.
    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Final `(state, weight)` pairs, ascending by state id.
    pub fn finals(&self) -> &[(StateId, f64)] {
        &self.finals
    }

    pub fn final_weight(&self, state: StateId) -> Option<f64> {
        self.index.get(&state).and_then(|&i| self.final_w[i])
    }

    /// Arcs in canonical order: sorted by (src, label, dst, weight).
    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    /// Outgoing arcs of `state` in canonical order.
    pub fn arcs_from(&self, state: StateId) -> impl Iterator<Item = &Arc> {
        self.index
            .get(&state)
            .map(|&i| self.out[i].as_slice())
            .unwrap_or(&[])
            .iter()
            .map(|&i| &self.arcs[i])
    }

    /// State ids in topological order. Sources precede targets; among the
    /// simultaneously ready, smaller ids come first.
    pub fn topological_order(&self) -> Vec<StateId> {
        self.topo.iter().map(|&i| self.states[i]).collect()
    }

    fn accessible(&self) -> Vec<bool> {
        let mut seen = vec![false; self.states.len()];
        let mut stack = vec![self.index[&self.start]];
        seen[self.index[&self.start]] = true;
        while let Some(s) = stack.pop() {
            for &ai in &self.out[s] {
                let d = self.index[&self.arcs[ai].dst];
                if !seen[d] {
                    seen[d] = true;
                    stack.push(d);
                }
            }
        }
        seen
    }

    fn coaccessible(&self) -> Vec<bool> {
        let mut seen: Vec<bool> = self.final_w.iter().map(Option::is_some).collect();
        // Walking states in reverse topological order propagates
        // coaccessibility across every arc in one sweep.
        for &s in self.topo.iter().rev() {
            for &ai in &self.out[s] {
                if seen[self.index[&self.arcs[ai].dst]] {
                    seen[s] = true;
                }
            }
        }
        seen
    }

    /// Removes states that are not on any start-to-final path. The result
    /// contains exactly the same path set.
    pub fn trim(&self) -> Result<Lattice> {
        let accessible = self.accessible();
        let coaccessible = self.coaccessible();
        let keep: Vec<bool> = accessible
            .iter()
            .zip(&coaccessible)
            .map(|(&a, &c)| a && c)
            .collect();
        let finals = self
            .finals
            .iter()
            .filter(|&&(s, _)| keep[self.index[&s]])
            .copied()
            .collect();
        let arcs = self
            .arcs
            .iter()
            .filter(|a| keep[self.index[&a.src]] && keep[self.index[&a.dst]])
            .copied()
            .collect();
        Lattice::from_parts(self.start, finals, arcs)
    }

    /// Negative log of the total path mass `sum over paths of
    /// exp(-weight)`. `-inf` means zero mass, which cannot happen for a
    /// constructed lattice.
    pub fn neg_log_total_mass(&self) -> f64 {
        let logmass = self.backward_log_mass(1.0);
        -logmass[self.index[&self.start]]
    }

    /// Total path probability mass; 1.0 for a normalized lattice.
    pub fn total_mass(&self) -> f64 {
        (-self.neg_log_total_mass()).exp()
    }

    /// Log of the mass flowing from each state to the finals, dense-indexed,
    /// with arc and final weights scaled by `beta`.
    fn backward_log_mass(&self, beta: f64) -> Vec<f64> {
        let mut logmass = vec![f64::NEG_INFINITY; self.states.len()];
        let mut terms = Vec::new();
        for &s in self.topo.iter().rev() {
            terms.clear();
            if let Some(f) = self.final_w[s] {
                terms.push(-f * beta);
            }
            for &ai in &self.out[s] {
                let arc = &self.arcs[ai];
                terms.push(-arc.weight * beta + logmass[self.index[&arc.dst]]);
            }
            logmass[s] = log_sum_exp(&terms);
        }
        logmass
    }

    /// Rescales all weights by `beta` and pushes weights so that path
    /// probabilities sum to one: the returned lattice assigns each path
    /// the probability `exp(-beta * weight) / Z` it had under the scaled
    /// input. Weight pushing keeps every state locally stochastic, so
    /// downstream forward passes can run in probability space.
    ///
    /// Requires `beta > 0` and a fully connected lattice (every state on
    /// some start-to-final path); run [`trim`](Self::trim) first if needed.
    /// Idempotent at `beta = 1`.
    pub fn normalize_posterior(&self, beta: f64) -> Result<Lattice> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::Invalid(format!(
                "beta must be finite and positive, got {beta}"
            )));
        }
        let accessible = self.accessible();
        let coaccessible = self.coaccessible();
        for (i, &state) in self.states.iter().enumerate() {
            if !(accessible[i] && coaccessible[i]) {
                return Err(Error::Disconnected { state });
            }
        }

        let logmass = self.backward_log_mass(beta);
        let total = logmass[self.index[&self.start]];
        if !total.is_finite() {
            return Err(Error::DegenerateMass);
        }

        let arcs = self
            .arcs
            .iter()
            .map(|a| Arc {
                src: a.src,
                dst: a.dst,
                label: a.label,
                weight: a.weight * beta + logmass[self.index[&a.src]]
                    - logmass[self.index[&a.dst]],
            })
            .collect();
        let finals = self
            .finals
            .iter()
            .map(|&(s, f)| (s, f * beta + logmass[self.index[&s]]))
            .collect();
        Lattice::from_parts(self.start, finals, arcs)
    }

    /// Number of start-to-final paths. Saturates at `u128::MAX`.
    pub fn path_count(&self) -> u128 {
        let mut counts = vec![0u128; self.states.len()];
        for &s in self.topo.iter().rev() {
            let mut n: u128 = if self.final_w[s].is_some() { 1 } else { 0 };
            for &ai in &self.out[s] {
                n = n.saturating_add(counts[self.index[&self.arcs[ai].dst]]);
            }
            counts[s] = n;
        }
        counts[self.index[&self.start]]
    }

    /// Enumerates every start-to-final path in canonical arc order, a
    /// prefix emitted before its extensions. Fails with
    /// [`Error::TooManyPaths`] before allocating anything when the path
    /// count exceeds `max_paths`.
    pub fn enumerate_paths(&self, max_paths: u64) -> Result<Vec<Path>> {
        let count = self.path_count();
        if count > max_paths as u128 {
            return Err(Error::TooManyPaths {
                count: count.min(u64::MAX as u128) as u64,
                limit: max_paths,
            });
        }
        let mut paths = Vec::with_capacity(count as usize);
        let mut tokens = Vec::new();
        self.walk(self.index[&self.start], 0.0, &mut tokens, &mut paths);
        Ok(paths)
    }

    fn walk(&self, s: usize, weight: f64, tokens: &mut Vec<TokenId>, paths: &mut Vec<Path>) {
        if let Some(f) = self.final_w[s] {
            paths.push(Path {
                tokens: tokens.clone(),
                prob: (-(weight + f)).exp(),
            });
        }
        for &ai in &self.out[s] {
            let arc = &self.arcs[ai];
            tokens.push(arc.label);
            self.walk(self.index[&arc.dst], weight + arc.weight, tokens, paths);
            tokens.pop();
        }
    }
}

/// Dense, probability-space view of a lattice for forward passes: states
/// renumbered `0..n`, arcs grouped by source in topological order, weights
/// exponentiated. Built once per lattice and shared across per-pattern
/// passes.
pub(crate) struct ForwardPlan {
    pub num_states: usize,
    pub start: usize,
    /// `(src, dst, label, prob)` with sources in topological order.
    pub arcs: Vec<(usize, usize, TokenId, f64)>,
    /// `(state, prob)` for final states.
    pub finals: Vec<(usize, f64)>,
}

impl Lattice {
    pub(crate) fn forward_plan(&self) -> ForwardPlan {
        // Renumber so that position in `topo` is the dense id; forward
        // passes can then walk `arcs` linearly.
        let mut pos = vec![0usize; self.states.len()];
        for (p, &s) in self.topo.iter().enumerate() {
            pos[s] = p;
        }
        let mut arcs = Vec::with_capacity(self.arcs.len());
        for &s in &self.topo {
            for &ai in &self.out[s] {
                let arc = &self.arcs[ai];
                arcs.push((
                    pos[s],
                    pos[self.index[&arc.dst]],
                    arc.label,
                    (-arc.weight).exp(),
                ));
            }
        }
        let finals = self
            .finals
            .iter()
            .map(|&(s, f)| (pos[self.index[&s]], (-f).exp()))
            .collect();
        ForwardPlan {
            num_states: self.states.len(),
            start: pos[self.index[&self.start]],
            arcs,
            finals,
        }
    }
}

fn toposort(
    states: &[StateId],
    index: &HashMap<StateId, usize>,
    arcs: &[Arc],
    out: &[Vec<usize>],
) -> Result<Vec<usize>> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    let mut indegree = vec![0usize; states.len()];
    for arc in arcs {
        indegree[index[&arc.dst]] += 1;
    }
    let mut ready: BinaryHeap<Reverse<StateId>> = states
        .iter()
        .filter(|s| indegree[index[s]] == 0)
        .map(|&s| Reverse(s))
        .collect();
    let mut order = Vec::with_capacity(states.len());
    while let Some(Reverse(s)) = ready.pop() {
        let si = index[&s];
        order.push(si);
        for &ai in &out[si] {
            let d = index[&arcs[ai].dst];
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.push(Reverse(arcs[ai].dst));
            }
        }
    }
    if order.len() < states.len() {
        // Some arc among the leftover states closes a cycle; report the
        // smallest such arc as the witness.
        let leftover: HashSet<usize> = (0..states.len()).filter(|i| indegree[*i] > 0).collect();
        let witness = arcs
            .iter()
            .filter(|a| leftover.contains(&index[&a.src]) && leftover.contains(&index[&a.dst]))
            .map(|a| (a.src, a.dst))
            .min()
            .expect("a cycle must contain at least one arc");
        return Err(Error::Cycle {
            src: witness.0,
            dst: witness.1,
        });
    }
    Ok(order)
}

/// Parses the text lattice format: arc lines `src dst token weight`, final
/// lines `state weight`, `#` comment lines, blank lines ignored. The start
/// state is the source of the first arc line. Unseen tokens are interned
/// through `symbols` (or rejected if it is frozen).
pub fn read_lattice(text: &str, symbols: &mut SymbolTable) -> Result<Lattice> {
    let mut arcs = Vec::new();
    let mut finals = Vec::new();
    let mut start = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [src, dst, token, weight] => {
                let src: StateId = src
                    .parse()
                    .map_err(|_| parse_err(format!("bad state id {src:?}")))?;
                let dst: StateId = dst
                    .parse()
                    .map_err(|_| parse_err(format!("bad state id {dst:?}")))?;
                if *token == EPSILON_STR {
                    return Err(parse_err(
                        "epsilon label not allowed in a lattice file".into(),
                    ));
                }
                let label = symbols.intern(token)?;
                let weight: f64 = weight
                    .parse()
                    .map_err(|_| parse_err(format!("bad weight {weight:?}")))?;
                if !weight.is_finite() {
                    return Err(parse_err(format!("non-finite weight {weight}")));
                }
                start.get_or_insert(src);
                arcs.push(Arc {
                    src,
                    dst,
                    label,
                    weight,
                });
            }
            [state, weight] => {
                let state: StateId = state
                    .parse()
                    .map_err(|_| parse_err(format!("bad state id {state:?}")))?;
                let weight: f64 = weight
                    .parse()
                    .map_err(|_| parse_err(format!("bad weight {weight:?}")))?;
                finals.push((state, weight));
            }
            _ => {
                return Err(parse_err(format!(
                    "expected `src dst token weight` or `state weight`, got {} fields",
                    fields.len()
                )));
            }
        }
    }
    let start = start.ok_or(Error::NoArcs)?;
    Lattice::from_parts(start, finals, arcs)
}

/// Renders a lattice in the text format accepted by [`read_lattice`]:
/// the start state's arcs first (so reading infers the right start), then
/// the remaining arcs in canonical order, then final lines, weights with
/// six decimals.
pub fn write_lattice(lattice: &Lattice, symbols: &SymbolTable) -> Result<String> {
    if lattice.num_arcs() == 0 {
        return Err(Error::NoArcs);
    }
    if lattice.arcs_from(lattice.start()).next().is_none() {
        return Err(Error::Invalid(
            "start state has no outgoing arcs; the text format cannot express it".into(),
        ));
    }
    let mut out = String::new();
    let write_arc = |out: &mut String, arc: &Arc| -> Result<()> {
        let token = symbols.resolve(arc.label).ok_or_else(|| {
            Error::Invalid(format!("token id {} is not in the symbol table", arc.label))
        })?;
        writeln!(
            out,
            "{} {} {} {:.6}",
            arc.src, arc.dst, token, arc.weight
        )
        .unwrap();
        Ok(())
    };
    for arc in lattice.arcs_from(lattice.start()) {
        write_arc(&mut out, arc)?;
    }
    for arc in lattice.arcs() {
        if arc.src != lattice.start() {
            write_arc(&mut out, arc)?;
        }
    }
    for &(state, weight) in lattice.finals() {
        writeln!(out, "{state} {weight:.6}").unwrap();
    }
    Ok(out)
}

/// Compiles an n-best list into a lattice whose path set is exactly the
/// list: hypotheses share prefixes through a trie and suffixes through
/// state merging, arc weights are zero, and each hypothesis' score sits on
/// the final weight of its last state. Duplicate hypotheses keep their
/// best (lowest) score and log a warning. State numbering is breadth-first
/// from the start, so equal inputs give identical lattices.
pub fn nbest_to_lattice(entries: &[NbestEntry]) -> Result<Lattice> {
    if entries.is_empty() {
        return Err(Error::Invalid("empty n-best list".into()));
    }
    let mut best: Vec<(&[TokenId], f64)> = Vec::new();
    let mut seen: HashMap<&[TokenId], usize> = HashMap::new();
    for entry in entries {
        if entry.tokens.is_empty() {
            return Err(Error::Invalid("empty hypothesis in n-best list".into()));
        }
        if entry.tokens.contains(&EPSILON) {
            return Err(Error::Invalid("epsilon token in n-best hypothesis".into()));
        }
        if !entry.score.is_finite() {
            return Err(Error::Invalid(format!(
                "non-finite n-best score {}",
                entry.score
            )));
        }
        match seen.entry(entry.tokens.as_slice()) {
            Entry::Vacant(slot) => {
                slot.insert(best.len());
                best.push((&entry.tokens, entry.score));
            }
            Entry::Occupied(slot) => {
                let kept = &mut best[*slot.get()];
                log::warn!(
                    "duplicate hypothesis in n-best list; keeping best score ({} vs {})",
                    kept.1,
                    entry.score
                );
                kept.1 = kept.1.min(entry.score);
            }
        }
    }

    // Prefix trie. Node 0 is the root; arcs carry zero weight and the
    // hypothesis score lands on the final weight of its end node.
    struct Node {
        children: BTreeMap<TokenId, usize>,
        final_weight: Option<f64>,
        depth: usize,
    }
    let mut nodes = vec![Node {
        children: BTreeMap::new(),
        final_weight: None,
        depth: 0,
    }];
    for &(tokens, score) in &best {
        let mut at = 0;
        for &token in tokens {
            at = match nodes[at].children.get(&token) {
                Some(&child) => child,
                None => {
                    let child = nodes.len();
                    let depth = nodes[at].depth + 1;
                    nodes.push(Node {
                        children: BTreeMap::new(),
                        final_weight: None,
                        depth,
                    });
                    nodes[at].children.insert(token, child);
                    child
                }
            };
        }
        nodes[at].final_weight = Some(score);
    }

    // Suffix sharing: two states merge when they agree on finality, final
    // weight, and the merged classes of their children. Processing deepest
    // first makes child classes available before their parents.
    let mut by_depth: Vec<usize> = (0..nodes.len()).collect();
    by_depth.sort_by_key(|&n| std::cmp::Reverse(nodes[n].depth));
    type Signature = (Option<u64>, Vec<(TokenId, usize)>);
    let mut classes: HashMap<Signature, usize> = HashMap::new();
    let mut class_of = vec![usize::MAX; nodes.len()];
    let mut class_count = 0;
    for &n in &by_depth {
        let sig: Signature = (
            nodes[n].final_weight.map(f64::to_bits),
            nodes[n]
                .children
                .iter()
                .map(|(&t, &c)| (t, class_of[c]))
                .collect(),
        );
        let next = class_count;
        class_of[n] = *classes.entry(sig).or_insert_with(|| {
            class_count += 1;
            next
        });
    }

    // Renumber classes breadth-first from the root for a stable layout.
    let mut representative = vec![usize::MAX; class_count];
    for n in 0..nodes.len() {
        let c = class_of[n];
        if representative[c] == usize::MAX {
            representative[c] = n;
        }
    }
    let mut state_of_class = vec![StateId::MAX; class_count];
    let mut queue = std::collections::VecDeque::new();
    let mut next_state: StateId = 0;
    state_of_class[class_of[0]] = 0;
    next_state += 1;
    queue.push_back(class_of[0]);
    let mut arcs = Vec::new();
    let mut finals = Vec::new();
    while let Some(c) = queue.pop_front() {
        let src = state_of_class[c];
        let node = &nodes[representative[c]];
        if let Some(w) = node.final_weight {
            finals.push((src, w));
        }
        for (&token, &child) in &node.children {
            let cc = class_of[child];
            if state_of_class[cc] == StateId::MAX {
                state_of_class[cc] = next_state;
                next_state += 1;
                queue.push_back(cc);
            }
            arcs.push(Arc {
                src,
                dst: state_of_class[cc],
                label: token,
                weight: 0.0,
            });
        }
    }
    Lattice::from_parts(0, finals, arcs)
}
