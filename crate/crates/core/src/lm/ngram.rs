//! Count-based backoff N-gram model with Witten-Bell smoothing.
//!
//! With history `h` seen `c(h)` times followed by `T(h)` distinct words,
//!
//! ```text
//! P(w|h) = (c(h,w) + T(h) P(w|h')) / (c(h) + T(h))
//! ```
//!
//! where `h'` drops the oldest word. The unigram level interpolates with the
//! uniform distribution over all predictable tokens, so every token gets
//! non-zero probability. The maximum-likelihood variant uses relative
//! frequencies at the longest seen history and backs off only for unseen
//! histories.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Direction, LanguageModelScorer, LmError, Vocab, WordId, BOS_ID, EOS_ID};
use crate::error::FormatError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NgramSmoothing {
    WittenBell,
    MaximumLikelihood,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct HistoryCounts {
    followers: BTreeMap<WordId, u64>,
    total: u64,
}

impl HistoryCounts {
    fn types(&self) -> u64 {
        self.followers.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackoffNgram {
    pub order: usize,
    pub smoothing: NgramSmoothing,
    pub direction: Direction,
    vocab: Vocab,
    /// `levels[k]` maps histories of length `k` to their follower counts.
    levels: Vec<BTreeMap<Vec<WordId>, HistoryCounts>>,
}

/// JSON form: history keys are not strings, so levels become entry lists.
#[derive(Serialize, Deserialize)]
struct Stored {
    order: usize,
    smoothing: NgramSmoothing,
    direction: Direction,
    vocab: Vocab,
    levels: Vec<Vec<(Vec<WordId>, HistoryCounts)>>,
}

/// Trains on sentences given in sentence order; a backward model counts the
/// reversed sentences. Words outside `vocab` count as `<unk>`.
pub fn train_ngram(
    corpus: &[Vec<String>],
    vocab: &Vocab,
    order: usize,
    smoothing: NgramSmoothing,
    direction: Direction,
) -> Result<BackoffNgram, LmError> {
    if order == 0 {
        return Err(LmError::InvalidConfig("order must be at least 1".into()));
    }
    if corpus.iter().all(Vec::is_empty) {
        return Err(LmError::EmptyInput);
    }
    let mut levels: Vec<BTreeMap<Vec<WordId>, HistoryCounts>> = vec![BTreeMap::new(); order];
    for s in corpus {
        let mut seq = vec![BOS_ID];
        seq.extend(direction.arrange(&vocab.encode(s)));
        seq.push(EOS_ID);
        for i in 1..seq.len() {
            for (k, level) in levels.iter_mut().enumerate() {
                if k > i {
                    break;
                }
                let h = seq[i - k..i].to_vec();
                let e = level.entry(h).or_default();
                *e.followers.entry(seq[i]).or_default() += 1;
                e.total += 1;
            }
        }
    }
    Ok(BackoffNgram { order, smoothing, direction, vocab: vocab.clone(), levels })
}

impl BackoffNgram {
    /// Full history for the next token: `<s>` followed by `context`,
    /// truncated to the model order.
    fn history(&self, context: &[WordId]) -> Vec<WordId> {
        let mut h = vec![BOS_ID];
        h.extend_from_slice(context);
        let keep = (self.order - 1).min(h.len());
        h[h.len() - keep..].to_vec()
    }

    fn uniform(&self) -> f64 {
        1.0 / self.vocab.num_outcomes() as f64
    }

    fn prob(&self, h: &[WordId], w: WordId) -> f64 {
        if w == BOS_ID {
            return 0.0;
        }
        let lower = |s: &Self| if h.is_empty() { s.uniform() } else { s.prob(&h[1..], w) };
        let Some(hc) = self.levels[h.len()].get(h) else {
            return lower(self);
        };
        let c = hc.followers.get(&w).copied().unwrap_or(0) as f64;
        match self.smoothing {
            NgramSmoothing::WittenBell => {
                let t = hc.types() as f64;
                (c + t * lower(self)) / (hc.total as f64 + t)
            }
            NgramSmoothing::MaximumLikelihood => c / hc.total as f64,
        }
    }

    /// Back-off weight of a seen history: the mass reserved for the shorter
    /// history.
    fn backoff_weight(&self, h: &[WordId]) -> f64 {
        match (self.levels[h.len()].get(h), self.smoothing) {
            (None, _) => 1.0,
            (Some(hc), NgramSmoothing::WittenBell) => hc.types() as f64 / (hc.total + hc.types()) as f64,
            (Some(_), NgramSmoothing::MaximumLikelihood) => 0.0,
        }
    }

    /// Sampled histories of each length that occur in training.
    pub fn histories(&self) -> Vec<Vec<WordId>> {
        self.levels.iter().flat_map(|l| l.keys().cloned()).collect()
    }

    /// Probability for an explicit history (which may start with `<s>`).
    pub fn prob_given_history(&self, history: &[WordId], w: WordId) -> f64 {
        let keep = (self.order - 1).min(history.len());
        self.prob(&history[history.len() - keep..], w)
    }

    /// ARPA text export (log10). Every seen n-gram is listed with its
    /// smoothed probability; histories carry their back-off weights. The
    /// unigram section lists every vocabulary token.
    pub fn write_arpa<W: Write>(&self, mut out: W) -> Result<(), FormatError> {
        let log10 = |p: f64| if p > 0.0 { p.log10() } else { -99.0 };
        // entries[n-1]: n-gram -> (log10 prob, optional log10 bow)
        let mut entries: Vec<BTreeMap<Vec<WordId>, (f64, Option<f64>)>> = vec![BTreeMap::new(); self.order];
        for id in 0..self.vocab.len() as WordId {
            entries[0].insert(vec![id], (log10(self.prob(&[], id)), None));
        }
        for (k, level) in self.levels.iter().enumerate().skip(1) {
            for (h, hc) in level {
                for &w in hc.followers.keys() {
                    let mut g = h.clone();
                    g.push(w);
                    entries[k].insert(g, (log10(self.prob(h, w)), None));
                }
            }
        }
        for (k, level) in self.levels.iter().enumerate().skip(1) {
            for h in level.keys() {
                let bow = log10(self.backoff_weight(h));
                match entries[k - 1].get_mut(h) {
                    Some(e) => e.1 = Some(bow),
                    None => {
                        // history only seen as a prefix; list it with its
                        // own smoothed probability
                        let p = log10(self.prob(&h[..k - 1], h[k - 1]));
                        entries[k - 1].insert(h.clone(), (p, Some(bow)));
                    }
                }
            }
        }
        writeln!(out, "\\data\\")?;
        for (k, e) in entries.iter().enumerate() {
            writeln!(out, "ngram {}={}", k + 1, e.len())?;
        }
        for (k, e) in entries.iter().enumerate() {
            writeln!(out, "\n\\{}-grams:", k + 1)?;
            for (g, (p, bow)) in e {
                let words: Vec<&str> = g.iter().map(|&id| self.vocab.word(id)).collect();
                match bow {
                    Some(b) => writeln!(out, "{:.7}\t{}\t{:.7}", p, words.join(" "), b)?,
                    None => writeln!(out, "{:.7}\t{}", p, words.join(" "))?,
                }
            }
        }
        writeln!(out, "\n\\end\\")?;
        Ok(())
    }
}

impl BackoffNgram {
    pub fn save<W: Write>(&self, out: W) -> Result<(), FormatError> {
        let stored = Stored {
            order: self.order,
            smoothing: self.smoothing,
            direction: self.direction,
            vocab: self.vocab.clone(),
            levels: self.levels.iter().map(|l| l.iter().map(|(h, c)| (h.clone(), c.clone())).collect()).collect(),
        };
        serde_json::to_writer(out, &stored)?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self, FormatError> {
        let s: Stored = serde_json::from_reader(input)?;
        if s.order == 0 || s.levels.len() != s.order {
            return Err(FormatError::Malformed(format!("{} count levels for order {}", s.levels.len(), s.order)));
        }
        let mut vocab = s.vocab;
        vocab.reindex();
        Ok(Self {
            order: s.order,
            smoothing: s.smoothing,
            direction: s.direction,
            vocab,
            levels: s.levels.into_iter().map(|l| l.into_iter().collect()).collect(),
        })
    }
}

impl LanguageModelScorer for BackoffNgram {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn direction(&self) -> Direction {
        self.direction
    }

    fn distribution(&self, context: &[WordId]) -> Vec<f64> {
        let h = self.history(context);
        (0..self.vocab.len() as WordId).map(|w| self.prob(&h, w).ln()).collect()
    }

    fn log_prob(&self, context: &[WordId], word: WordId) -> f64 {
        self.prob(&self.history(context), word).ln()
    }
}
