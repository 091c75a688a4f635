use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::Matrix;

pub type TokenId = u32;

/// Output id of the null symbol ∅. Also used by the token LMs as the
/// end-of-sequence id, since neither model ever needs both.
pub const NULL_ID: TokenId = 0;

/// `V` real tokens with ids `1..=V`, ∅ at 0 and an internal start marker
/// at `V + 1` that is consumed by the prediction network but never emitted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(contract("vocabulary must contain at least one token"));
        }
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c.is_control()) {
                return Err(contract(format!("symbol {s:?} is not a printable word")));
            }
            if symbols[..i].contains(s) {
                return Err(contract(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Vocabulary { symbols })
    }

    /// `a`, `b`, … for `size ≤ 26`, `t1`, `t2`, … otherwise.
    pub fn letters(size: usize) -> Self {
        let symbols = (0..size)
            .map(|i| {
                if size <= 26 {
                    ((b'a' + i as u8) as char).to_string()
                } else {
                    format!("t{}", i + 1)
                }
            })
            .collect();
        Vocabulary { symbols }
    }

    /// Number of real tokens `V`.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn null_id(&self) -> TokenId {
        NULL_ID
    }

    pub fn bos_id(&self) -> TokenId {
        self.size() as TokenId + 1
    }

    /// `V + 1`: real tokens plus ∅.
    pub fn output_size(&self) -> usize {
        self.size() + 1
    }

    /// `V + 2`: rows of an embedding table that also holds the start marker.
    pub fn embedding_rows(&self) -> usize {
        self.size() + 2
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        if id == NULL_ID {
            return None;
        }
        self.symbols.get(id as usize - 1).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .map(|i| i as TokenId + 1)
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(&self, text: &str) -> Result<TokenSequence> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| contract(format!("unknown symbol {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence::from(ids))
    }

    pub fn is_real_token(&self, id: TokenId) -> bool {
        id >= 1 && (id as usize) <= self.size()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = crate::error::Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        Vocabulary::new(symbols)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.symbols
    }
}

/// A label sequence over the real tokens. Construction does not know the
/// vocabulary; call [`TokenSequence::check`] before trusting the ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn empty() -> Self {
        TokenSequence(Vec::new())
    }

    pub fn check(&self, vocab: &Vocabulary) -> Result<()> {
        match self.0.iter().find(|&&t| !vocab.is_real_token(t)) {
            Some(bad) => Err(contract(format!(
                "token id {bad} is not a real token of a {}-symbol vocabulary",
                vocab.size()
            ))),
            None => Ok(()),
        }
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSequence(v)
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

/// `T` frames of `d`-dimensional features.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticSequence {
    pub utterance_id: String,
    pub frames: Matrix,
}

impl AcousticSequence {
    pub fn new(utterance_id: impl Into<String>, frames: Matrix) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(contract("acoustic sequence needs at least one frame"));
        }
        if frames.data().iter().any(|x| !x.is_finite()) {
            return Err(contract("acoustic frames must be finite"));
        }
        Ok(AcousticSequence {
            utterance_id: utterance_id.into(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}
