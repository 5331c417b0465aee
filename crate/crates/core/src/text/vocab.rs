use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Report-token vocabulary. Ids 0..4 are PAD, BOS, EOS, UNK; the rest are
/// dense and ordered by descending corpus frequency, ties lexicographic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tok in corpus.iter().flatten() {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            ids: HashMap::new(),
        };
        for (i, r) in RESERVED.iter().enumerate() {
            v.ids.insert(r.to_string(), i);
        }
        for tok in tokens {
            if v.ids.contains_key(&tok) {
                return Err(Error::Invalid(format!(
                    "duplicate vocabulary token {tok:?}"
                )));
            }
            v.ids.insert(tok.clone(), v.tokens.len());
            v.tokens.push(tok);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token; out-of-vocabulary tokens map to UNK.
    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::OutOfRange {
                what: "vocabulary",
                index: id,
                size: self.tokens.len(),
            })
    }

    /// One non-reserved token per line; line `n` holds id `n + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// `BOS ids.. EOS` truncated so that EOS stays last, then PAD-filled to
/// `max_len`.
pub fn encode_report<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<TokenId> {
    assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
    let body = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(tokens[..body].iter().map(|t| vocab.id(t.as_ref())));
    ids.push(EOS);
    ids.resize(max_len, PAD);
    ids
}

/// Drops PAD and BOS, stops at the first EOS, joins with single spaces.
pub fn decode_ids(ids: &[TokenId], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab.token(id)?;
        match id {
            EOS => break,
            PAD | BOS => {}
            _ => words.push(tok),
        }
    }
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(words: &[&[&str]]) -> Vec<Vec<String>> {
        words
            .iter()
            .map(|r| r.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocabulary::build(&corpus(&[&["a", "b", "a"]]), 1).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        let v = Vocabulary::build(&corpus(&[&["zeta", "alpha", "mid"]]), 1).unwrap();
        assert_eq!([v.id("alpha"), v.id("mid"), v.id("zeta")], [4, 5, 6]);
    }

    #[test]
    fn min_count_filters_to_unk() {
        let v = Vocabulary::build(&corpus(&[&["a", "b"]]), 2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), UNK);
    }

    #[test]
    fn empty_corpus_is_reserved_only() {
        let v = Vocabulary::build::<String>(&[], 1).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn encode_pads_and_truncates() {
        let v = Vocabulary::build(&corpus(&[&["a"]]), 1).unwrap();
        assert_eq!(encode_report(&["a"], &v, 4), vec![BOS, 4, EOS, PAD]);
        let ten: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let v = Vocabulary::build(std::slice::from_ref(&ten), 1).unwrap();
        let ids = encode_report(&ten, &v, 5);
        assert_eq!(ids, vec![BOS, v.id("t0"), v.id("t1"), v.id("t2"), EOS]);
        assert_eq!(encode_report::<&str>(&[], &v, 4), vec![BOS, EOS, PAD, PAD]);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::build(&corpus(&[&["a", "b"]]), 1).unwrap();
        let (a, b) = (v.id("a"), v.id("b"));
        assert_eq!(decode_ids(&[BOS, a, b, EOS, PAD], &v).unwrap(), "a b");
        assert_eq!(decode_ids(&[BOS, EOS], &v).unwrap(), "");
        assert!(decode_ids(&[BOS, 99], &v).is_err());
    }

    #[test]
    fn text_serialization_round_trip() {
        let v = Vocabulary::build(&corpus(&[&["x", "y", "y", "."]]), 1).unwrap();
        let text = v.to_text();
        assert_eq!(text.lines().next(), Some("y"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in proptest::collection::vec("[a-e]{1,3}", 0..12)) {
            let v = Vocabulary::build(std::slice::from_ref(&words), 1).unwrap();
            let ids = encode_report(&words, &v, words.len() + 3);
            prop_assert_eq!(decode_ids(&ids, &v).unwrap(), words.join(" "));
        }

        #[test]
        fn build_is_order_independent(mut words in proptest::collection::vec("[a-d]", 1..20)) {
            let a = Vocabulary::build(&[words.clone()], 1).unwrap();
            words.reverse();
            let b = Vocabulary::build(&[words], 1).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
