use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

/// Index into a [`KeywordVocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeywordId(pub usize);

/// Unordered set of keyword ids, stored sorted and deduplicated so that the
/// order in which keywords were supplied is never observable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct KeywordSet(Vec<KeywordId>);

impl KeywordSet {
    pub fn new(ids: impl IntoIterator<Item = KeywordId>) -> Self {
        let mut v: Vec<KeywordId> = ids.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        KeywordSet(v)
    }

    pub fn empty() -> Self {
        KeywordSet(Vec::new())
    }

    pub fn ids(&self) -> &[KeywordId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: KeywordId) -> bool {
        self.0.binary_search(&id).is_ok()
    }
}

impl FromIterator<KeywordId> for KeywordSet {
    fn from_iter<I: IntoIterator<Item = KeywordId>>(iter: I) -> Self {
        KeywordSet::new(iter)
    }
}

/// Keyword labels are atomic: "macular edema" is one entry. The label text
/// doubles as the surface string read by the contextual keyword encoder.
/// Ids `0..n` are labels; id `n` is the UNK keyword.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordVocab {
    labels: Vec<String>,
    ids: HashMap<String, KeywordId>,
}

/// Canonical label spelling: trimmed, lowercased, inner whitespace collapsed.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl KeywordVocab {
    /// Labels ordered by descending frequency, ties lexicographic.
    pub fn build<S: AsRef<str>>(label_sets: &[Vec<S>]) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for l in label_sets.iter().flatten() {
            let n = normalize_label(l.as_ref());
            if !n.is_empty() {
                *counts.entry(n).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self::from_labels(kept.into_iter().map(|(l, _)| l)).expect("labels unique")
    }

    pub fn from_labels(labels: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = KeywordVocab {
            labels: Vec::new(),
            ids: HashMap::new(),
        };
        for l in labels {
            let n = normalize_label(&l);
            if n.is_empty() || v.ids.contains_key(&n) {
                return Err(Error::Invalid(format!(
                    "bad or duplicate keyword label {l:?}"
                )));
            }
            v.ids.insert(n.clone(), KeywordId(v.labels.len()));
            v.labels.push(n);
        }
        Ok(v)
    }

    /// Number of real labels (excluding UNK).
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn unk(&self) -> KeywordId {
        KeywordId(self.labels.len())
    }

    /// Label id, or the UNK keyword for anything unseen.
    pub fn id(&self, label: &str) -> KeywordId {
        self.ids
            .get(&normalize_label(label))
            .copied()
            .unwrap_or(self.unk())
    }

    pub fn set_from_labels<S: AsRef<str>>(&self, labels: &[S]) -> KeywordSet {
        labels.iter().map(|l| self.id(l.as_ref())).collect()
    }

    /// Surface string for a keyword; the UNK keyword has none.
    pub fn surface(&self, id: KeywordId) -> Option<&str> {
        self.labels.get(id.0).map(String::as_str)
    }

    pub fn label(&self, id: KeywordId) -> &str {
        self.surface(id).unwrap_or("<unk-keyword>")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// One label per line; line `n` holds keyword id `n`.
    pub fn to_text(&self) -> String {
        self.labels.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_labels(text.lines().map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_equality_ignores_order_and_duplicates() {
        let a = KeywordSet::new([KeywordId(3), KeywordId(1)]);
        let b = KeywordSet::new([KeywordId(1), KeywordId(3), KeywordId(1)]);
        assert_eq!(a, b);
        assert_eq!(a.ids(), &[KeywordId(1), KeywordId(3)]);
    }

    #[test]
    fn labels_are_normalized_and_unknowns_map_to_unk() {
        let v = KeywordVocab::build(&[vec!["Retinal  Hemorrhage", "DR"], vec!["dr"]]);
        assert_eq!(
            v.labels(),
            &["dr".to_string(), "retinal hemorrhage".to_string()]
        );
        assert_eq!(v.id(" retinal hemorrhage "), KeywordId(1));
        assert_eq!(v.id("glaucoma"), v.unk());
        assert_eq!(v.surface(v.unk()), None);
    }

    #[test]
    fn text_round_trip() {
        let v = KeywordVocab::build(&[vec!["b", "a", "c c"]]);
        assert_eq!(KeywordVocab::from_text(&v.to_text()).unwrap(), v);
    }
}
