//! Word-level tokenizer over the closed vocabulary of a fact world.

use std::collections::{BTreeSet, HashMap};

use crate::model::TokenId;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Specials first, then the given words in sorted order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let sorted: BTreeSet<&str> = words
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !SPECIALS.contains(w))
            .collect();
        let words: Vec<String> = SPECIALS
            .iter()
            .copied()
            .chain(sorted)
            .map(str::to_string)
            .collect();
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self { words, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(SPECIALS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let t = Tokenizer::from_words(["b a", "c"]);
        assert_eq!(t.id("<pad>"), Some(PAD));
        assert_eq!(t.id("<eos>"), Some(EOS));
        assert_eq!(t.id("<unk>"), Some(UNK));
        assert_eq!(t.vocab_size(), 6);
        assert_eq!(t.encode("a b c"), vec![3, 4, 5]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let t = Tokenizer::from_words(["known"]);
        assert_eq!(t.encode("known stranger"), vec![3, UNK]);
    }

    #[test]
    fn round_trips_known_text() {
        let t = Tokenizer::from_words(["the capital of zorabi is", "vel doran"]);
        let s = "the capital of zorabi is vel doran";
        assert_eq!(t.decode(&t.encode(s)), s);
    }
}
