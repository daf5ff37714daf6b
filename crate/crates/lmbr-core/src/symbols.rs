//! Token interning.
//!
//! Every component works on dense integer token ids; the symbol table owns
//! the bijection between ids and UTF-8 token strings. Three ids are
//! reserved and present in every table:
//!
//! * 0 `<eps>`: epsilon label, only legal transiently inside lattice
//!   conversion passes, never in a decodable lattice;
//! * 1 `<unk>`: unknown token, the image of out-of-vocabulary tokens under
//!   scorer vocabulary mapping;
//! * 2 `</s>`: end-of-sentence marker consumed by scorers and the decoder.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const EPSILON: TokenId = 0;
pub const UNK: TokenId = 1;
pub const EOS: TokenId = 2;

pub const EPSILON_STR: &str = "<eps>";
pub const UNK_STR: &str = "<unk>";
pub const EOS_STR: &str = "</s>";

/// Bijective map between token strings and dense ids `0..len()`.
///
/// A table starts mutable: unseen tokens are interned on first use. Freezing
/// pins the vocabulary, after which lookups of unseen tokens fail with
/// [`Error::UnknownSymbol`] instead of growing the table. Reserved ids are
/// seeded at construction and are identical across all tables.
#[derive(Debug, Clone, Default)]
pub struct SymbolTable {
    id_to_str: Vec<String>,
    str_to_id: HashMap<String, TokenId>,
    frozen: bool,
}

impl SymbolTable {
    pub fn new() -> Self {
        let mut table = SymbolTable {
            id_to_str: Vec::new(),
            str_to_id: HashMap::new(),
            frozen: false,
        };
        for reserved in [EPSILON_STR, UNK_STR, EOS_STR] {
            table.insert(reserved);
        }
        table
    }

    fn insert(&mut self, token: &str) -> TokenId {
        debug_assert!(!self.frozen);
        let id = self.id_to_str.len() as TokenId;
        self.id_to_str.push(token.to_owned());
        self.str_to_id.insert(token.to_owned(), id);
        id
    }

    /// Id for `token`, interning it if the table is still mutable.
    pub fn intern(&mut self, token: &str) -> Result<TokenId> {
        if let Some(&id) = self.str_to_id.get(token) {
            return Ok(id);
        }
        if self.frozen {
            return Err(Error::UnknownSymbol {
                token: token.to_owned(),
            });
        }
        if token.chars().any(char::is_whitespace) || token.is_empty() {
            return Err(Error::Invalid(format!(
                "token {token:?} is empty or contains whitespace"
            )));
        }
        Ok(self.insert(token))
    }

    /// Id for `token` without interning, regardless of frozen state.
    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.str_to_id.get(token).copied()
    }

    /// Token string for `id`.
    pub fn resolve(&self, id: TokenId) -> Option<&str> {
        self.id_to_str.get(id as usize).map(String::as_str)
    }

    /// Pins the vocabulary; later lookups of unseen tokens fail.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.id_to_str.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_str.is_empty()
    }

    /// All `(id, token)` pairs in id order.
    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &str)> {
        self.id_to_str
            .iter()
            .enumerate()
            .map(|(id, token)| (id as TokenId, token.as_str()))
    }

    /// Interns every whitespace-separated token of `line`.
    pub fn intern_line(&mut self, line: &str) -> Result<Vec<TokenId>> {
        line.split_whitespace().map(|t| self.intern(t)).collect()
    }

    /// Renders `ids` as a space-joined token string. Fails on ids outside
    /// the table, which indicates a bug in the caller.
    pub fn render(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let token = self.resolve(id).ok_or_else(|| {
                Error::Invalid(format!("token id {id} is not in the symbol table"))
            })?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(token);
        }
        Ok(out)
    }

    /// Serializes as one `token<TAB>id` line per symbol, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, token) in self.iter() {
            writeln!(out, "{token}\t{id}").unwrap();
        }
        out
    }

    /// Parses the [`to_text`](Self::to_text) format. Ids must be dense
    /// `0..n` with the reserved ids bound to the reserved strings; any
    /// whitespace separates the two fields.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (token, id) = match (fields.next(), fields.next(), fields.next()) {
                (Some(token), Some(id), None) => (token, id),
                _ => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("expected `token id`, got {line:?}"),
                    })
                }
            };
            let id: TokenId = id.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("bad id {id:?}"),
            })?;
            pairs.push((lineno + 1, token.to_owned(), id));
        }
        pairs.sort_by_key(|&(_, _, id)| id);

        let mut table = SymbolTable::new();
        for (lineno, token, id) in pairs {
            let expected = table.id_to_str.len() as TokenId;
            if id < 3 {
                let reserved = [EPSILON_STR, UNK_STR, EOS_STR][id as usize];
                if token != reserved {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("id {id} is reserved for {reserved:?}, got {token:?}"),
                    });
                }
                continue;
            }
            if id != expected {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("ids must be dense: expected {expected}, got {id}"),
                });
            }
            if table.str_to_id.contains_key(&token) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("duplicate token {token:?}"),
                });
            }
            table.insert(&token);
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_seeded() {
        let table = SymbolTable::new();
        assert_eq!(table.resolve(EPSILON), Some(EPSILON_STR));
        assert_eq!(table.resolve(UNK), Some(UNK_STR));
        assert_eq!(table.resolve(EOS), Some(EOS_STR));
        assert_eq!(table.len(), 3);
    }

    #[test]
    fn intern_is_stable() {
        let mut table = SymbolTable::new();
        let a = table.intern("a").unwrap();
        let b = table.intern("b").unwrap();
        assert_ne!(a, b);
        assert_eq!(table.intern("a").unwrap(), a);
        assert_eq!(table.resolve(a), Some("a"));
    }

    #[test]
    fn frozen_table_rejects_unseen_tokens() {
        let mut table = SymbolTable::new();
        table.intern("a").unwrap();
        table.freeze();
        assert_eq!(table.intern("a").unwrap(), 3);
        match table.intern("b") {
            Err(Error::UnknownSymbol { token }) => assert_eq!(token, "b"),
            other => panic!("expected UnknownSymbol, got {other:?}"),
        }
    }

    #[test]
    fn whitespace_tokens_are_rejected() {
        let mut table = SymbolTable::new();
        assert!(table.intern("a b").is_err());
        assert!(table.intern("").is_err());
    }

    #[test]
    fn text_round_trip_preserves_bijection() {
        let mut table = SymbolTable::new();
        for token in ["alpha", "beta", "gamma"] {
            table.intern(token).unwrap();
        }
        let restored = SymbolTable::from_text(&table.to_text()).unwrap();
        assert_eq!(restored.len(), table.len());
        for (id, token) in table.iter() {
            assert_eq!(restored.resolve(id), Some(token));
            assert_eq!(restored.get(token), Some(id));
        }
    }

    #[test]
    fn from_text_rejects_sparse_ids() {
        let err = SymbolTable::from_text("<eps>\t0\n<unk>\t1\n</s>\t2\na\t5\n");
        assert!(err.is_err(), "sparse ids must be rejected");
    }

    #[test]
    fn from_text_rejects_reserved_mismatch() {
        let err = SymbolTable::from_text("foo\t0\n");
        assert!(err.is_err(), "id 0 must map to <eps>");
    }

    #[test]
    fn render_joins_tokens() {
        let mut table = SymbolTable::new();
        let ids = table.intern_line("a b a").unwrap();
        assert_eq!(table.render(&ids).unwrap(), "a b a");
        assert!(table.render(&[999]).is_err());
    }
}
