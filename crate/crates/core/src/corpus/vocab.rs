use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;
/// Sequence-start token whose final state serves as the pooled embedding.
pub const CLS: usize = 5;
pub const SEP: usize = 6;

pub const SPECIALS: [&str; 7] = ["<pad>", "<unk>", "<mask>", "<bos>", "<eos>", "<cls>", "<sep>"];

/// Dense token ↔ id map. Ids 0..7 are the reserved tokens above.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials followed by `tokens` in the given order, duplicates dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    fn push(&mut self, t: String) {
        if !self.ids.contains_key(&t) {
            self.ids.insert(t.clone(), self.tokens.len());
            self.tokens.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn try_id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids that random MLM replacements may draw from.
    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        SPECIALS.len()..self.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_tokens(["def", "x", "def"]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<mask>"), MASK);
        assert_eq!(v.id("<cls>"), CLS);
        assert_eq!(v.id("def"), 7);
        assert_eq!(v.len(), 9);
        assert_eq!(v.id("nope"), UNK);
        assert!(v.try_id("nope").is_err());
        assert_eq!(v.decode(&v.encode(&["x", "def"])), vec!["x", "def"]);
    }
}
