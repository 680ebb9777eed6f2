use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Lowercases, drops every character that is not alphanumeric or whitespace,
/// and splits on whitespace.
pub fn tokenize(caption: &str) -> Vec<String> {
    let cleaned: String = caption
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Token/id mapping with ids 0..4 reserved. Corpus tokens get ids in order of
/// decreasing frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for caption in corpus {
            for tok in tokenize(caption) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(t, _)| t)).collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list (reserved
    /// entries included).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().filter(|&i| i >= RESERVED.len()).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    /// `SOS t_1 .. t_k EOS PAD ..` of length `max_len`; content is truncated
    /// to `max_len - 2` tokens.
    pub fn encode(&self, tokens: &[String], max_len: usize) -> Vec<usize> {
        let keep = max_len.saturating_sub(2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(SOS);
        ids.extend(tokens.iter().take(keep).map(|t| self.id(t)));
        ids.push(EOS);
        ids.resize(max_len.max(ids.len()), PAD);
        ids
    }

    /// Tokens up to the first EOS, skipping SOS and PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != SOS && i != PAD)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization() {
        assert_eq!(tokenize("A Black Chair."), ["a", "black", "chair"]);
        assert_eq!(tokenize("  It's  next,to\tthe wall! "), ["its", "nextto", "the", "wall"]);
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocabulary::build(["a a b"]);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        let v = Vocabulary::build(["z y", "y x"]);
        // y twice; x and z once each, x first lexicographically
        assert_eq!(&v.tokens()[4..], ["y", "x", "z"]);
    }

    #[test]
    fn unknown_and_reserved_words_map_to_unk() {
        let v = Vocabulary::build(["a b"]);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.id("<eos>"), UNK);
    }

    #[test]
    fn encode_pads_and_truncates() {
        let v = Vocabulary::build(["a b c"]);
        let toks: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(v.encode(&toks, 6), [SOS, 4, 5, EOS, PAD, PAD]);
        let long: Vec<String> = (0..40).map(|_| "c".to_string()).collect();
        let enc = v.encode(&long, 32);
        assert_eq!(enc.len(), 32);
        assert_eq!(enc[31], EOS);
        assert_eq!(v.decode(&enc).len(), 30);
    }

    proptest! {
        #[test]
        fn round_trip(words in prop::collection::vec("[a-e]{1,3}", 0..30)) {
            let corpus = words.join(" ");
            let v = Vocabulary::build([corpus.as_str()]);
            prop_assert_eq!(v.decode(&v.encode(&words, 32)), words);
        }

        #[test]
        fn depends_only_on_token_multiset(mut words in prop::collection::vec("[a-d]{1,2}", 1..20), seed in 0u64..100) {
            let a = Vocabulary::build([words.join(" ").as_str()]);
            let n = words.len();
            words.rotate_left(seed as usize % n);
            let b = Vocabulary::build([words.join(" ").as_str()]);
            prop_assert_eq!(a, b);
        }
    }
}
