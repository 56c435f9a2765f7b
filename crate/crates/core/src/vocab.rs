//! Token vocabulary and token sequences.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Bijection between token strings and contiguous ids, with reserved BOS, EOS
/// and UNK entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    unk: TokenId,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    unk: TokenId,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocabulary::from_parts(r.tokens, r.bos, r.eos, r.unk)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr { tokens: v.tokens, bos: v.bos, eos: v.eos, unk: v.unk }
    }
}

impl Vocabulary {
    /// Builds a vocabulary with the specials at ids 0, 1, 2 (BOS, EOS, UNK)
    /// followed by `words` in order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]
            .into_iter()
            .map(String::from)
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::from_parts(tokens, 0, 1, 2)
    }

    pub fn from_parts(tokens: Vec<String>, bos: TokenId, eos: TokenId, unk: TokenId) -> Result<Self> {
        let size = tokens.len();
        for (name, id) in [("bos", bos), ("eos", eos), ("unk", unk)] {
            if id as usize >= size {
                return Err(Error::InvalidVocab(format!("{name} id {id} outside vocabulary of size {size}")));
            }
        }
        if bos == eos || bos == unk || eos == unk {
            return Err(Error::InvalidVocab("bos, eos and unk must be distinct".into()));
        }
        if size < 5 {
            return Err(Error::InvalidVocab(format!(
                "need at least 2 non-special tokens, found {}",
                size.saturating_sub(3)
            )));
        }
        let mut index = HashMap::with_capacity(size);
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocab(format!("token {id} is empty or contains whitespace")));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index, bos, eos, unk })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos || id == self.unk
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of every non-special token, ascending.
    pub fn regular_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId).filter(|&id| !self.is_special(id)).collect()
    }

    /// Joins token strings with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(UNK_TOKEN));
        }
        out
    }

    pub fn check(&self, seq: &TokenSeq) -> Result<()> {
        match seq.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size: self.len() }),
            None => Ok(()),
        }
    }

    /// Text form: a `#specials` header line followed by one token per line;
    /// the token on the `i`-th line after the header has id `i`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#specials bos={} eos={} unk={}", self.bos, self.eos, self.unk);
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "missing #specials header"))?;
        let rest =
            header.strip_prefix("#specials").ok_or_else(|| Error::parse(1, "first line must start with #specials"))?;
        let (mut bos, mut eos, mut unk) = (None, None, None);
        for field in rest.split_whitespace() {
            let (key, value) =
                field.split_once('=').ok_or_else(|| Error::parse(1, format!("malformed header field {field:?}")))?;
            let id: TokenId = value.parse().map_err(|_| Error::parse(1, format!("non-integer id in {field:?}")))?;
            match key {
                "bos" => bos = Some(id),
                "eos" => eos = Some(id),
                "unk" => unk = Some(id),
                _ => return Err(Error::parse(1, format!("unknown header key {key:?}"))),
            }
        }
        let (Some(bos), Some(eos), Some(unk)) = (bos, eos, unk) else {
            return Err(Error::parse(1, "header must define bos, eos and unk"));
        };
        let tokens: Vec<String> = lines.map(str::to_owned).collect();
        Self::from_parts(tokens, bos, eos, unk)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// An ordered list of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    /// Copy with `eos` appended.
    pub fn with_eos(&self, eos: TokenId) -> TokenSeq {
        let mut ids = self.0.clone();
        ids.push(eos);
        TokenSeq(ids)
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_are_reserved() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!((v.bos(), v.eos(), v.unk()), (0, 1, 2));
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.regular_ids(), vec![3, 4]);
    }

    #[test]
    fn rejects_small_or_duplicate() {
        assert!(Vocabulary::new(["a"]).is_err());
        assert!(Vocabulary::new(["a", "a"]).is_err());
        assert!(Vocabulary::new(["a", "<eos>"]).is_err());
        let toks = ["x", "y", "a", "b"].map(String::from).to_vec();
        assert!(Vocabulary::from_parts(toks, 0, 0, 1).is_err());
    }

    #[test]
    fn text_format_header_and_lines() {
        let v = Vocabulary::new(["hello", "world"]).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("#specials bos=0 eos=1 unk=2\n<bos>\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
    }

    #[test]
    fn text_format_errors() {
        assert!(matches!(Vocabulary::from_text("a\nb\n"), Err(Error::Parse { line: 1, .. })));
        assert!(Vocabulary::from_text("#specials bos=0 eos=1\na\nb\nc\nd\ne").is_err());
    }

    #[test]
    fn check_flags_out_of_range() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        assert!(v.check(&TokenSeq(vec![3, 4])).is_ok());
        assert!(matches!(v.check(&TokenSeq(vec![5])), Err(Error::TokenOutOfRange { id: 5, .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_ids(words in prop::collection::hash_set("[a-z]{1,6}", 2..40)) {
            let v = Vocabulary::new(words.iter().cloned()).unwrap();
            for id in 0..v.len() as TokenId {
                prop_assert_eq!(v.id(v.token(id).unwrap()), Some(id));
            }
            prop_assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        }
    }
}
