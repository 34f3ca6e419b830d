//! N-best rescoring with log-linear feature weights.
//!
//! Each hypothesis carries named scalar features. The combined score is the
//! dot product with a weight map, and weights are tuned for 1-best WER by
//! coordinate search over a fixed grid.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;
use crate::lm::{LanguageModelScorer, Vocab};
use crate::score::{score_utterance, ScoreConfig, ScoreError};

pub const AM_SCORE: &str = "am_score";
pub const NGRAM_LM: &str = "ngram_lm";
pub const NEURAL_FWD: &str = "neural_fwd";
pub const NEURAL_BWD: &str = "neural_bwd";
pub const WORD_COUNT: &str = "word_count";
pub const OOV_COUNT: &str = "oov_count";
pub const PRON_SCORE: &str = "pron_score";

pub const DEFAULT_NBEST_DEPTH: usize = 500;

#[derive(Debug, Error)]
pub enum RescoreError {
    #[error("feature {0} missing from hypothesis")]
    MissingFeature(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid n-best list: {0}")]
    InvalidList(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub words: Vec<String>,
    pub features: BTreeMap<String, f64>,
}

impl Hypothesis {
    /// New hypothesis with `word_count` filled in.
    pub fn new(words: Vec<String>) -> Self {
        let mut features = BTreeMap::new();
        features.insert(WORD_COUNT.to_string(), words.len() as f64);
        Self { words, features }
    }

    pub fn with_feature(mut self, name: &str, value: f64) -> Self {
        self.features.insert(name.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<(), RescoreError> {
        if let Some((k, _)) = self.features.iter().find(|(_, v)| !v.is_finite()) {
            return Err(RescoreError::InvalidList(format!("feature {} is not finite", k)));
        }
        match self.features.get(WORD_COUNT) {
            Some(&c) if c != self.words.len() as f64 => {
                Err(RescoreError::InvalidList(format!("word_count {} but {} words", c, self.words.len())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utt_id: String,
    #[serde(rename = "system")]
    pub source_system: String,
    #[serde(rename = "hyps")]
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    pub fn validate(&self) -> Result<(), RescoreError> {
        if self.hypotheses.is_empty() {
            return Err(RescoreError::InvalidList(format!("{}: no hypotheses", self.utt_id)));
        }
        self.hypotheses.iter().try_for_each(Hypothesis::validate)
    }

    /// Indices of hypotheses whose word sequence already appeared earlier.
    pub fn duplicates(&self) -> Vec<usize> {
        let mut seen = std::collections::BTreeSet::new();
        (0..self.hypotheses.len()).filter(|&i| !seen.insert(&self.hypotheses[i].words)).collect()
    }

    /// Keeps the first `n` hypotheses.
    pub fn truncate(&mut self, n: usize) {
        self.hypotheses.truncate(n.max(1));
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreWeights(pub BTreeMap<String, f64>);

impl ScoreWeights {
    pub fn from_pairs(pairs: &[(&str, f64)]) -> Self {
        Self(pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect())
    }

    pub fn get(&self, name: &str) -> f64 {
        self.0.get(name).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.0.insert(name.to_string(), value);
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|(k, v)| (k.clone(), alpha * v)).collect())
    }

    pub fn validate(&self) -> Result<(), RescoreError> {
        if self.0.values().any(|v| !v.is_finite()) {
            return Err(RescoreError::InvalidWeights("non-finite weight".into()));
        }
        if self.0.values().all(|&v| v == 0.0) {
            return Err(RescoreError::InvalidWeights("all weights are zero".into()));
        }
        Ok(())
    }

    pub fn read_json<R: std::io::Read>(input: R) -> Result<Self, RescoreError> {
        let w: Self = serde_json::from_reader(input).map_err(FormatError::from)?;
        w.validate()?;
        Ok(w)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), FormatError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Acoustic and N-gram weights of 1 with equal forward and backward neural
/// weights and no length or OOV terms.
pub fn default_weights() -> ScoreWeights {
    ScoreWeights::from_pairs(&[
        (AM_SCORE, 1.0),
        (NGRAM_LM, 1.0),
        (NEURAL_FWD, 1.0),
        (NEURAL_BWD, 1.0),
        (WORD_COUNT, 0.0),
        (OOV_COUNT, 0.0),
    ])
}

/// Weighted sum of features. Every feature named in `w` must be present.
pub fn score_hypothesis(h: &Hypothesis, w: &ScoreWeights) -> Result<f64, RescoreError> {
    let mut s = 0.0;
    for (name, &wt) in &w.0 {
        let f = h.features.get(name).ok_or_else(|| RescoreError::MissingFeature(name.clone()))?;
        s += wt * f;
    }
    Ok(s)
}

/// Index of the best-scoring hypothesis; the earliest wins ties.
pub fn best_index(list: &NBestList, w: &ScoreWeights) -> Result<usize, RescoreError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in list.hypotheses.iter().enumerate() {
        let s = score_hypothesis(h, w)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(RescoreError::EmptyInput)
}

/// Hypothesis indices ordered by descending score, stable on ties.
pub fn rerank(list: &NBestList, w: &ScoreWeights) -> Result<Vec<usize>, RescoreError> {
    let scores: Vec<f64> = list.hypotheses.iter().map(|h| score_hypothesis(h, w)).collect::<Result<_, _>>()?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(idx)
}

/// 1-best word sequences for many lists, rescored in parallel.
pub fn rescore_lists(lists: &[NBestList], w: &ScoreWeights) -> Result<Vec<(String, Vec<String>)>, RescoreError> {
    lists
        .par_iter()
        .map(|l| Ok((l.utt_id.clone(), l.hypotheses[best_index(l, w)?].words.clone())))
        .collect()
}

/// Language-model features for one hypothesis. `ngram_lm` is the full
/// sentence log-probability. The neural scores skip word positions outside
/// `neural_vocab`; those words are counted in `oov_count` instead.
pub fn lm_features(
    words: &[String],
    ngram: &dyn LanguageModelScorer,
    neural_fwd: &dyn LanguageModelScorer,
    neural_bwd: &dyn LanguageModelScorer,
    neural_vocab: &Vocab,
) -> BTreeMap<String, f64> {
    let in_set: Vec<bool> = words.iter().map(|w| neural_vocab.contains(w)).collect();
    let neural = |lm: &dyn LanguageModelScorer| {
        let ids = lm.vocab().encode(words);
        let lp = lm.sentence_token_logprobs(&ids);
        // the last entry is the end-of-sentence token
        lp.iter().enumerate().filter(|&(i, _)| i >= words.len() || in_set[i]).map(|(_, x)| x).sum::<f64>()
    };
    let mut f = BTreeMap::new();
    f.insert(NGRAM_LM.to_string(), ngram.sentence_logprob(&ngram.vocab().encode(words)));
    f.insert(NEURAL_FWD.to_string(), neural(neural_fwd));
    f.insert(NEURAL_BWD.to_string(), neural(neural_bwd));
    f.insert(OOV_COUNT.to_string(), in_set.iter().filter(|&&b| !b).count() as f64);
    f.insert(WORD_COUNT.to_string(), words.len() as f64);
    f
}

/// WER in percent of one hypothesis against a reference.
pub fn hypothesis_wer(reference: &[String], hyp: &[String], cfg: &ScoreConfig) -> Result<f64, RescoreError> {
    Ok(score_utterance(reference, hyp, cfg)?.1.wer)
}

/// Lowest WER (percent) reachable by picking one hypothesis from the list.
pub fn oracle_wer(list: &NBestList, reference: &[String], cfg: &ScoreConfig) -> Result<f64, RescoreError> {
    let mut best = f64::INFINITY;
    for h in &list.hypotheses {
        best = best.min(hypothesis_wer(reference, &h.words, cfg)?);
    }
    if best.is_infinite() {
        return Err(RescoreError::EmptyInput);
    }
    Ok(best)
}

/// Search grid for one weight: zero and ± a 1-2-5 ladder from 0.01 to 10.
pub fn weight_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    for e in -2..=0 {
        for m in [1.0, 2.0, 5.0] {
            let v = m * 10f64.powi(e);
            g.push(v);
            g.push(-v);
        }
    }
    g.push(10.0);
    g.push(-10.0);
    g.sort_by(f64::total_cmp);
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub sweeps: usize,
    /// Feature held at its initial weight, fixing the overall scale.
    pub anchor: String,
    pub grid: Vec<f64>,
    pub score: ScoreConfig,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self { sweeps: 3, anchor: AM_SCORE.to_string(), grid: weight_grid(), score: ScoreConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub weights: ScoreWeights,
    pub initial_wer: f64,
    pub wer: f64,
}

/// Dev set with per-hypothesis error counts computed once.
struct DevErrors<'a> {
    lists: Vec<&'a NBestList>,
    errors: Vec<Vec<u64>>,
    ref_words: u64,
}

impl<'a> DevErrors<'a> {
    fn new(dev: &'a [(NBestList, Vec<String>)], cfg: &ScoreConfig) -> Result<Self, RescoreError> {
        let per: Vec<(Vec<u64>, u64)> = dev
            .par_iter()
            .map(|(l, r)| {
                let mut errs = Vec::with_capacity(l.hypotheses.len());
                let mut n = 0;
                for h in &l.hypotheses {
                    let rep = score_utterance(r, &h.words, cfg)?.1;
                    n = rep.counts.ref_words;
                    errs.push(rep.counts.errors());
                }
                Ok((errs, n))
            })
            .collect::<Result<_, RescoreError>>()?;
        let ref_words = per.iter().map(|p| p.1).sum();
        Ok(Self { lists: dev.iter().map(|d| &d.0).collect(), errors: per.into_iter().map(|p| p.0).collect(), ref_words })
    }

    fn wer(&self, w: &ScoreWeights) -> Result<f64, RescoreError> {
        let mut e = 0;
        for (l, errs) in self.lists.iter().zip(&self.errors) {
            e += errs[best_index(l, w)?];
        }
        Ok(100.0 * e as f64 / self.ref_words as f64)
    }
}

/// Corpus 1-best WER (percent) of a dev set under `w`.
pub fn dev_wer(dev: &[(NBestList, Vec<String>)], w: &ScoreWeights, cfg: &ScoreConfig) -> Result<f64, RescoreError> {
    if dev.is_empty() {
        return Err(RescoreError::EmptyInput);
    }
    DevErrors::new(dev, cfg)?.wer(w)
}

/// Coordinate descent on the grid. Features are visited in name order and
/// a grid value replaces the current weight only if it strictly lowers dev
/// WER, so ties keep the previous value and the result is never worse than
/// `init`. The anchor feature is not searched.
pub fn optimize_weights(
    dev: &[(NBestList, Vec<String>)],
    init: &ScoreWeights,
    cfg: &OptimizeConfig,
) -> Result<OptimizeResult, RescoreError> {
    if dev.is_empty() {
        return Err(RescoreError::EmptyInput);
    }
    init.validate()?;
    for (l, r) in dev {
        l.validate()?;
        if r.is_empty() {
            return Err(ScoreError::EmptyReference.into());
        }
    }
    let d = DevErrors::new(dev, &cfg.score)?;
    let mut w = init.clone();
    let initial_wer = d.wer(&w)?;
    let mut cur = initial_wer;
    let names: Vec<String> = init.0.keys().filter(|k| **k != cfg.anchor).cloned().collect();
    for sweep in 0..cfg.sweeps {
        let before = cur;
        for name in &names {
            let keep = w.get(name);
            let mut best = (cur, keep);
            for &v in &cfg.grid {
                w.set(name, v);
                if w.0.values().all(|&x| x == 0.0) {
                    continue;
                }
                let e = d.wer(&w)?;
                if e < best.0 {
                    best = (e, v);
                }
            }
            w.set(name, best.1);
            cur = best.0;
        }
        log::debug!("weight sweep {}: dev WER {:.3}", sweep + 1, cur);
        if cur == before {
            break;
        }
    }
    Ok(OptimizeResult { weights: w, initial_wer, wer: cur })
}

pub fn read_nbest_jsonl<R: BufRead>(input: R) -> Result<Vec<NBestList>, RescoreError> {
    let mut out = Vec::new();
    for (ln, line) in input.lines().enumerate() {
        let line = line.map_err(FormatError::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let l: NBestList = serde_json::from_str(&line)
            .map_err(|e| FormatError::Malformed(format!("line {}: {}", ln + 1, e)))?;
        l.validate()?;
        out.push(l);
    }
    Ok(out)
}

pub fn write_nbest_jsonl<W: Write>(mut out: W, lists: &[NBestList]) -> Result<(), FormatError> {
    for l in lists {
        serde_json::to_writer(&mut out, l)?;
        writeln!(out)?;
    }
    Ok(())
}
