//! Letter-trigram word encoding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const BOUNDARY: char = '#';

/// Trigrams of `#word#`, in order of occurrence.
pub fn word_trigrams(word: &str) -> Vec<String> {
    let chars: Vec<char> = std::iter::once(BOUNDARY).chain(word.chars()).chain(std::iter::once(BOUNDARY)).collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

/// Trigram counts of a word, keyed by trigram.
pub fn letter_trigram_encode(word: &str) -> BTreeMap<String, u32> {
    let mut m = BTreeMap::new();
    for t in word_trigrams(word) {
        *m.entry(t).or_default() += 1;
    }
    m
}

/// Trigram inventory built from a training vocabulary. Index 0 is reserved
/// for trigrams outside the inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LetterTrigramEncoder {
    inventory: BTreeMap<String, usize>,
}

impl LetterTrigramEncoder {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut all: Vec<String> = words.iter().flat_map(|w| word_trigrams(w.as_ref())).collect();
        all.sort();
        all.dedup();
        Self { inventory: all.into_iter().enumerate().map(|(i, t)| (t, i + 1)).collect() }
    }

    /// Dimension including the reserved unknown bucket.
    pub fn dim(&self) -> usize {
        self.inventory.len() + 1
    }

    /// Sparse count vector as sorted `(index, count)` pairs.
    pub fn encode(&self, word: &str) -> Vec<(usize, f64)> {
        let mut m: BTreeMap<usize, f64> = BTreeMap::new();
        for t in word_trigrams(word) {
            *m.entry(self.inventory.get(&t).copied().unwrap_or(0)).or_default() += 1.0;
        }
        m.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let cat = letter_trigram_encode("cat");
        assert_eq!(cat.into_iter().collect::<Vec<_>>(), vec![("#ca".into(), 1), ("at#".into(), 1), ("cat".into(), 1)]);
        let aaa = letter_trigram_encode("aaa");
        assert_eq!(aaa.len(), 3);
        assert!(aaa.values().all(|&c| c == 1));
        assert!(aaa.contains_key("#aa") && aaa.contains_key("aaa") && aaa.contains_key("aa#"));
    }

    #[test]
    fn encoder_determinism_and_unknown_bucket() {
        let enc = LetterTrigramEncoder::new(&["cat", "act", "dog"]);
        assert_eq!(enc.encode("cat"), enc.encode("cat"));
        assert_ne!(enc.encode("cat"), enc.encode("act"));
        let z = enc.encode("zzz");
        assert_eq!(z, vec![(0, 3.0)]);
        assert!(enc.encode("cat").iter().all(|&(i, c)| i > 0 && c > 0.0));
        assert_eq!(enc.dim(), 10);
    }
}
