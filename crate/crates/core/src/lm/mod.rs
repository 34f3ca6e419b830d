//! Language models for N-best rescoring.
//!
//! All models share a [`Vocab`] and implement [`LanguageModelScorer`]. A
//! backward model reads every sentence right to left; callers always pass
//! and receive tokens in sentence order.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;

pub mod ngram;
pub mod rnn;
pub mod trigram;

pub use ngram::{train_ngram, BackoffNgram, NgramSmoothing};
pub use rnn::{
    layer_sweep, stabilizer_scale, train_recurrent_lm, CellType, InputEncoding, LayerSweepReport, RnnConfig,
    RnnTrainConfig, ToyRecurrentLM, TrainedRnnLm,
};
pub use trigram::{letter_trigram_encode, LetterTrigramEncoder};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("models do not share a vocabulary")]
    VocabMismatch,
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type WordId = u32;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const BOS_ID: WordId = 0;
pub const EOS_ID: WordId = 1;
pub const UNK_ID: WordId = 2;

/// Closed vocabulary: `<s>`, `</s>`, `<unk>`, then words in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, WordId>,
}

impl Vocab {
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut set: Vec<String> = words.into_iter().filter(|w| ![BOS, EOS, UNK].contains(&w.as_str())).collect();
        set.sort();
        set.dedup();
        let mut all = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        all.extend(set);
        Self::from_words(all)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as WordId)).collect();
        Self { words, index }
    }

    /// Words occurring at least `min_count` times in `corpus`.
    pub fn from_corpus(corpus: &[Vec<String>], min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in corpus {
            for w in s {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        Self::new(counts.into_iter().filter(|&(_, c)| c >= min_count).map(|(w, _)| w.to_string()))
    }

    /// Rebuilds the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        *self = Self::from_words(std::mem::take(&mut self.words));
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Number of predictable outcomes (everything but `<s>`).
    pub fn num_outcomes(&self) -> usize {
        self.words.len() - 1
    }

    pub fn id(&self, word: &str) -> WordId {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<WordId> {
        sentence.iter().map(|w| self.id(w.as_ref())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Tokens in processing order.
    pub fn arrange(&self, ids: &[WordId]) -> Vec<WordId> {
        match self {
            Direction::Forward => ids.to_vec(),
            Direction::Backward => ids.iter().rev().copied().collect(),
        }
    }
}

/// A word-level conditional model.
pub trait LanguageModelScorer: Sync {
    fn vocab(&self) -> &Vocab;

    fn direction(&self) -> Direction;

    /// Natural-log distribution over all ids given the tokens already read
    /// (in processing order, without `<s>`). The `<s>` entry is `-inf`.
    fn distribution(&self, context: &[WordId]) -> Vec<f64>;

    fn log_prob(&self, context: &[WordId], word: WordId) -> f64 {
        self.distribution(context)[word as usize]
    }

    /// Per-token log-probabilities of a sentence: entry `i` belongs to word
    /// `i` in sentence order and the final entry to the end token.
    fn sentence_token_logprobs(&self, sentence: &[WordId]) -> Vec<f64> {
        let seq = self.direction().arrange(sentence);
        let mut lp: Vec<f64> = (0..seq.len()).map(|i| self.log_prob(&seq[..i], seq[i])).collect();
        let end = self.log_prob(&seq, EOS_ID);
        if self.direction() == Direction::Backward {
            lp.reverse();
        }
        lp.push(end);
        lp
    }

    fn sentence_logprob(&self, sentence: &[WordId]) -> f64 {
        self.sentence_token_logprobs(sentence).iter().sum()
    }
}

impl<T: LanguageModelScorer + ?Sized + Send> LanguageModelScorer for Box<T> {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }
    fn direction(&self) -> Direction {
        (**self).direction()
    }
    fn distribution(&self, context: &[WordId]) -> Vec<f64> {
        (**self).distribution(context)
    }
    fn log_prob(&self, context: &[WordId], word: WordId) -> f64 {
        (**self).log_prob(context, word)
    }
    fn sentence_token_logprobs(&self, sentence: &[WordId]) -> Vec<f64> {
        (**self).sentence_token_logprobs(sentence)
    }
}

/// Assigns `1 / num_outcomes` to every predictable token.
#[derive(Debug, Clone)]
pub struct UniformLm {
    pub vocab: Vocab,
    pub direction: Direction,
}

impl LanguageModelScorer for UniformLm {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    fn direction(&self) -> Direction {
        self.direction
    }
    fn distribution(&self, _context: &[WordId]) -> Vec<f64> {
        let lp = -(self.vocab.num_outcomes() as f64).ln();
        let mut d = vec![lp; self.vocab.len()];
        d[BOS_ID as usize] = f64::NEG_INFINITY;
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub tokens: usize,
    pub log_prob: f64,
    /// Tokens that received zero probability; non-empty means infinite perplexity.
    pub zero_prob_tokens: Vec<String>,
}

/// `exp` of the mean negative log-probability per token, end tokens included.
pub fn perplexity<L: LanguageModelScorer + ?Sized>(lm: &L, text: &[Vec<String>]) -> Result<PerplexityReport, LmError> {
    let tokens: usize = text.iter().map(|s| s.len() + 1).sum();
    if text.is_empty() {
        return Err(LmError::EmptyInput);
    }
    let vocab = lm.vocab();
    let mut logprobs = Vec::with_capacity(tokens);
    let mut zero = Vec::new();
    for s in text {
        let ids = vocab.encode(s);
        let lp = lm.sentence_token_logprobs(&ids);
        for (i, &l) in lp.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                zero.push(s.get(i).cloned().unwrap_or_else(|| EOS.to_string()));
            }
            logprobs.push(l);
        }
    }
    let total = crate::numeric::compensated_sum(logprobs);
    let perplexity = if zero.is_empty() { (-total / tokens as f64).exp() } else { f64::INFINITY };
    Ok(PerplexityReport { perplexity, tokens, log_prob: total, zero_prob_tokens: zero })
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

pub const DEFAULT_INTERPOLATION: [f64; 3] = [0.375, 0.375, 0.25];

/// Linear interpolation weights, e.g. (neural-1, neural-2, N-gram).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSpec {
    pub weights: Vec<f64>,
}

impl Default for InterpolationSpec {
    fn default() -> Self {
        Self { weights: DEFAULT_INTERPOLATION.to_vec() }
    }
}

impl InterpolationSpec {
    pub fn new(weights: Vec<f64>) -> Result<Self, LmError> {
        let s = Self { weights };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LmError::InvalidConfig("interpolation weights must be non-negative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(LmError::InvalidConfig(format!("interpolation weights sum to {}", sum)));
        }
        Ok(())
    }
}

/// `ln(sum_i w_i p_i)` for per-word component probabilities.
pub fn interpolate_word_probs(p: &[f64], spec: &InterpolationSpec) -> Result<f64, LmError> {
    spec.validate()?;
    if p.len() != spec.weights.len() {
        return Err(LmError::InvalidConfig(format!("{} components for {} weights", p.len(), spec.weights.len())));
    }
    Ok(p.iter().zip(&spec.weights).map(|(p, w)| p * w).sum::<f64>().ln())
}

/// Word-level linear mixture of models sharing vocabulary and direction.
pub struct InterpolatedLm<'a> {
    pub components: Vec<&'a dyn LanguageModelScorer>,
    pub spec: InterpolationSpec,
}

impl<'a> InterpolatedLm<'a> {
    pub fn new(components: Vec<&'a dyn LanguageModelScorer>, spec: InterpolationSpec) -> Result<Self, LmError> {
        spec.validate()?;
        if components.len() != spec.weights.len() {
            return Err(LmError::InvalidConfig("component/weight count mismatch".into()));
        }
        let first = components.first().ok_or(LmError::EmptyInput)?;
        if components.iter().any(|c| c.vocab().words() != first.vocab().words()) {
            return Err(LmError::VocabMismatch);
        }
        if components.iter().any(|c| c.direction() != first.direction()) {
            return Err(LmError::InvalidConfig("components read in different directions".into()));
        }
        Ok(Self { components, spec })
    }

    fn mix(&self, per_component: Vec<Vec<f64>>) -> Vec<f64> {
        let n = per_component[0].len();
        (0..n)
            .map(|i| {
                let p: Vec<f64> = per_component.iter().map(|c| c[i].exp()).collect();
                interpolate_word_probs(&p, &self.spec).expect("validated at construction")
            })
            .collect()
    }
}

impl LanguageModelScorer for InterpolatedLm<'_> {
    fn vocab(&self) -> &Vocab {
        self.components[0].vocab()
    }
    fn direction(&self) -> Direction {
        self.components[0].direction()
    }
    fn distribution(&self, context: &[WordId]) -> Vec<f64> {
        self.mix(self.components.iter().map(|c| c.distribution(context)).collect())
    }
    fn sentence_token_logprobs(&self, sentence: &[WordId]) -> Vec<f64> {
        self.mix(self.components.iter().map(|c| c.sentence_token_logprobs(sentence)).collect())
    }
}

/// Reads one whitespace-tokenised sentence per line; blank lines are skipped.
pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<Vec<String>>, FormatError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if !words.is_empty() {
            out.push(words);
        }
    }
    Ok(out)
}

impl fmt::Display for PerplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ppl {:.3} over {} tokens", self.perplexity, self.tokens)?;
        if !self.zero_prob_tokens.is_empty() {
            write!(f, " (zero probability: {})", self.zero_prob_tokens.join(" "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(text: &str) -> Vec<Vec<String>> {
        text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::from_corpus(&corpus("b a\na c"), 1);
        assert_eq!(v.words(), &["<s>", "</s>", "<unk>", "a", "b", "c"]);
        assert_eq!(v.id("zzz"), UNK_ID);
        let v2 = Vocab::from_corpus(&corpus("b a\na c"), 2);
        assert_eq!(v2.words(), &["<s>", "</s>", "<unk>", "a"]);
        let mut back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        back.reindex();
        assert_eq!(back, v);
        assert_eq!(back.id("c"), 5);
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        for n in 1..60 {
            let v = Vocab::new((0..n).map(|i| format!("w{}", i)));
            let lm = UniformLm { vocab: v.clone(), direction: Direction::Forward };
            let text = corpus("w0 w1 w2\nw3 w0\nfoo");
            let r = perplexity(&lm, &text).unwrap();
            // exp(ln V) is V up to rounding of the logarithm
            let n = v.num_outcomes() as f64;
            assert!((r.perplexity - n).abs() <= 4.0 * f64::EPSILON * n, "{} vs {}", r.perplexity, n);
            assert_eq!(r.tokens, 9);
        }
    }

    #[test]
    fn interpolation_examples() {
        let spec = InterpolationSpec::default();
        let p = interpolate_word_probs(&[0.8, 0.6, 0.2], &spec).unwrap().exp();
        assert!((p - 0.575).abs() < 1e-12);
        let p = interpolate_word_probs(&[0.5, 0.5, 0.5], &spec).unwrap().exp();
        assert!((p - 0.5).abs() < 1e-15);
        assert!(matches!(interpolate_word_probs(&[0.5, 0.5], &spec), Err(LmError::InvalidConfig(_))));
        assert!(InterpolationSpec::new(vec![0.5, 0.6]).is_err());
        assert!(InterpolationSpec::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn empty_text_rejected() {
        let lm = UniformLm { vocab: Vocab::new(vec!["a".to_string()]), direction: Direction::Forward };
        assert!(matches!(perplexity(&lm, &[]), Err(LmError::EmptyInput)));
    }
}
