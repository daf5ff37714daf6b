//! Error type shared by every module in the crate.
//!
//! Variants are grouped by failure class: malformed input, structural
//! violations in lattices, resource limits on oracle-style enumeration, and
//! scorer transport/protocol faults. The CLI maps these classes onto exit
//! codes, so new variants should stay within one class.

use thiserror::Error;

use crate::lattice::StateId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed line in a text input (lattice, n-best list, posterior
    /// table, merge table, symbol table). Line numbers are 1-based.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A token was looked up in a frozen symbol table that does not
    /// contain it.
    #[error("unknown symbol {token:?} in frozen symbol table")]
    UnknownSymbol { token: String },

    /// A lattice contains a cycle; `src -> dst` is one back edge on it.
    #[error("lattice is cyclic: back edge {src} -> {dst}")]
    Cycle { src: StateId, dst: StateId },

    /// The lattice text contained no arc lines, so no start state can be
    /// inferred.
    #[error("lattice has no arcs")]
    NoArcs,

    /// A state is unreachable from the start state or cannot reach any
    /// final state, so path mass through it is undefined.
    #[error("state {state} is disconnected from the start-to-final path set")]
    Disconnected { state: StateId },

    /// Total path mass is zero or non-finite, so posterior normalization
    /// has no defined result.
    #[error("total path mass is degenerate; cannot normalize")]
    DegenerateMass,

    /// Path enumeration would exceed the caller-supplied bound.
    #[error("lattice has {count} paths, over the limit of {limit}")]
    TooManyPaths { count: u64, limit: u64 },

    /// N-gram collection would exceed the fixed safety bound.
    #[error("lattice has more than {limit} distinct n-grams")]
    TooManyNgrams { limit: usize },

    /// Exhaustive decoding would enumerate too many sequences.
    #[error("search space of {size} sequences exceeds the exhaustive limit of {limit}")]
    SearchSpaceTooLarge { size: u128, limit: u128 },

    /// Ensemble members disagree on the token support they score.
    #[error("scorer vocabulary mismatch: {message}")]
    VocabMismatch { message: String },

    /// Candidate and reference corpora have different sentence counts.
    #[error("corpus length mismatch: {candidates} candidates vs {references} references")]
    CorpusMismatch { candidates: usize, references: usize },

    /// The external scorer peer died, timed out, or the connection failed.
    /// `sentence` is the id of the sentence being scored, or "?" when the
    /// failure happened outside any sentence.
    #[error("scorer transport failure (sentence {sentence}): {message}")]
    Transport { sentence: String, message: String },

    /// The external scorer peer answered with something outside the wire
    /// protocol (bad frame shape, wrong state echo, ERR reply).
    #[error("scorer protocol violation: {message}")]
    Protocol { message: String },

    /// Precondition violation that does not fit a more specific variant.
    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for faults in the external-scorer channel itself, as opposed
    /// to faults in the data being processed.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport { .. } | Error::Protocol { .. })
    }
}
