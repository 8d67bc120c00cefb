use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const UNK: TokenId = 2;
pub const BOS: TokenId = 3;
pub const EOS: TokenId = 4;
pub const MENTION_OPEN: TokenId = 5;
pub const MENTION_CLOSE: TokenId = 6;

pub const RESERVED: [&str; 7] = ["[PAD]", "[MASK]", "[UNK]", "[BOS]", "[EOS]", "<m>", "</m>"];

/// Words used by the prompt-style span encodings; always in the vocabulary.
pub const PROMPT_WORDS: [&str; 9] = ["The", "type", "of", "is", ".", "<", ">", ",", "hasType"];

/// Whitespace-token vocabulary with dense ids; reserved tokens come first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    /// Keeps words seen at least `min_freq` times. Ids beyond the reserved
    /// block and prompt words are assigned in sorted word order.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in PROMPT_WORDS {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        for (w, c) in counts {
            if c >= min_freq && !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> Vec<TokenId> {
        words.into_iter().map(|w| self.id(w)).collect()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab { tokens, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_dense_and_distinct() {
        let v = Vocab::build(["a", "a", "b"], 2);
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i as TokenId);
        }
        assert_eq!(v.id("[MASK]"), MASK);
        assert_eq!(v.id("</m>"), MENTION_CLOSE);
    }

    #[test]
    fn rare_words_map_to_unk() {
        let v = Vocab::build(["a", "a", "b"], 2);
        assert!(v.contains("a"));
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("never"), UNK);
        assert!(v.contains("hasType"));
    }
}
