//! Lattice minimum Bayes-risk decoding toolkit.
//!
//! The crate turns a weighted lattice of translation hypotheses into an
//! n-gram posterior table, scores candidate sequences by expected n-gram
//! overlap with that table (plus a log-probability term from one or more
//! sequence scorers), and searches for the best-scoring sequence with a
//! beam decoder that is free to leave the lattice. Around that core sit
//! the supporting pieces: text formats for lattices, n-best lists, and
//! posterior tables; a wire protocol for out-of-process scorers; BPE
//! subword segmentation of both text and lattices; and an evaluation
//! harness (corpus BLEU, λ tuning, a synthetic translation task).

pub mod bpe;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod lattice;
pub mod mbr;
mod numeric;
pub mod posteriors;
pub mod scorer;
pub mod symbols;
pub mod testing;

pub use error::{Error, Result};
pub use lattice::{Arc, Lattice, NbestEntry, Path, StateId};
pub use symbols::{SymbolTable, TokenId, EOS, EPSILON, UNK};
