//! Deterministic fixtures and generators for randomized tests.
//!
//! Everything here is seeded: the same seed always yields the same
//! artifact, so failures reproduce exactly. The generators are public
//! because integration tests, benchmarks, and the language bindings all
//! use them to fabricate inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::lattice::{read_lattice, Arc, Lattice, StateId};
use crate::symbols::{SymbolTable, TokenId};

/// Two-path lattice used as a worked example throughout the test suite:
/// "a b" with probability ~0.6 and "a c" with ~0.4.
pub const FIXTURE_TEXT: &str = "0 1 a 0.0\n1 2 b 0.5108\n1 2 c 0.9163\n2 0.0\n";

/// Parses [`FIXTURE_TEXT`], interning its tokens into `symbols`.
pub fn fixture(symbols: &mut SymbolTable) -> Lattice {
    read_lattice(FIXTURE_TEXT, symbols).unwrap()
}

/// Shape bounds for [`random_lattice_with`].
#[derive(Debug, Clone, Copy)]
pub struct LatticeShape {
    pub max_states: usize,
    pub max_extra_arcs: usize,
    /// Number of distinct arc labels, drawn from ids `3..3 + vocab`.
    pub vocab: u32,
}

impl Default for LatticeShape {
    fn default() -> Self {
        LatticeShape {
            max_states: 8,
            max_extra_arcs: 6,
            vocab: 4,
        }
    }
}

/// Small random connected acyclic lattice (at most 8 states, 12 arcs)
/// suitable for brute-force comparison.
pub fn random_lattice(seed: u64) -> Lattice {
    random_lattice_with(seed, LatticeShape::default())
}

/// Random connected acyclic lattice within `shape`. States `0..n` are laid
/// out in topological order with a backbone path through all of them, so
/// every state lies on some start-to-final path and normalization always
/// succeeds.
pub fn random_lattice_with(seed: u64, shape: LatticeShape) -> Lattice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=shape.max_states.max(2));
    let label = |rng: &mut ChaCha8Rng| 3 + rng.random_range(0..shape.vocab) as TokenId;
    let weight = |rng: &mut ChaCha8Rng| rng.random_range(0.0..3.0);

    let mut arcs = Vec::new();
    for s in 0..n - 1 {
        arcs.push(Arc {
            src: s as StateId,
            dst: (s + 1) as StateId,
            label: label(&mut rng),
            weight: weight(&mut rng),
        });
    }
    for _ in 0..rng.random_range(0..=shape.max_extra_arcs) {
        if n < 2 {
            break;
        }
        let src = rng.random_range(0..n - 1);
        let dst = rng.random_range(src + 1..n);
        arcs.push(Arc {
            src: src as StateId,
            dst: dst as StateId,
            label: label(&mut rng),
            weight: weight(&mut rng),
        });
    }

    let mut finals = vec![((n - 1) as StateId, weight(&mut rng))];
    for s in 1..n - 1 {
        if rng.random_range(0.0..1.0) < 0.15 {
            finals.push((s as StateId, weight(&mut rng)));
        }
    }
    Lattice::from_parts(0, finals, arcs).expect("generated lattice is valid by construction")
}

/// Interns the ids `3..3 + vocab` used by the random generators as the
/// tokens `"w3".."w{2+vocab}"` so generated lattices can be rendered.
pub fn intern_generated_vocab(symbols: &mut SymbolTable, vocab: u32) {
    for id in 3..3 + vocab {
        let token = format!("w{id}");
        let got = symbols.intern(&token).unwrap();
        assert_eq!(got, id as TokenId, "generated vocab must intern densely");
    }
}
