//! Confusion networks and multi-system combination.
//!
//! An N-best list becomes a confusion network by aligning hypotheses
//! best-first against the growing network. Several networks are merged by
//! aligning their slots with an edit-distance search and blending
//! posteriors with per-system weights. System subsets are chosen greedily
//! on a dev set, with weights from a fixed ladder or from EM.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;
use crate::rescore::{score_hypothesis, NBestList, RescoreError, ScoreWeights};
use crate::score::{score_utterance, ScoreConfig, ScoreError};

/// The empty token.
pub const EPS: &str = "<eps>";

pub const DEFAULT_POSTERIOR_SCALE: f64 = 0.05;
pub const DEFAULT_LADDER: [f64; 4] = [1.0, 0.5, 0.2, 0.1];
pub const DEFAULT_SMOOTH: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CombineError {
    #[error("utterance mismatch: {0} vs {1}")]
    UtteranceMismatch(String, String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("no reference-aligned slots")]
    DegenerateInput,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid confusion network: {0}")]
    InvalidNetwork(String),
    #[error(transparent)]
    Rescore(#[from] RescoreError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub tokens: BTreeMap<String, f64>,
}

impl Slot {
    pub fn single(token: &str) -> Self {
        Self { tokens: BTreeMap::from([(token.to_string(), 1.0)]) }
    }

    pub fn get(&self, token: &str) -> f64 {
        self.tokens.get(token).copied().unwrap_or(0.0)
    }

    fn add(&mut self, token: &str, mass: f64) {
        *self.tokens.entry(token.to_string()).or_default() += mass;
    }

    fn total(&self) -> f64 {
        self.tokens.values().sum()
    }

    fn normalized(mut self) -> Self {
        let t = self.total();
        self.tokens.retain(|_, p| *p > 0.0);
        for p in self.tokens.values_mut() {
            *p /= t;
        }
        self
    }

    /// Highest-posterior token; ties go to the lexicographically smallest.
    pub fn best(&self) -> Option<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (t, &p) in &self.tokens {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((t, p));
            }
        }
        best.map(|b| b.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionNetwork {
    pub utt_id: String,
    pub slots: Vec<Slot>,
}

impl ConfusionNetwork {
    /// One slot per word, each certain.
    pub fn from_words(utt_id: &str, words: &[String]) -> Self {
        Self { utt_id: utt_id.to_string(), slots: words.iter().map(|w| Slot::single(w)).collect() }
    }

    pub fn validate(&self) -> Result<(), CombineError> {
        for (i, s) in self.slots.iter().enumerate() {
            if s.tokens.values().any(|&p| !(0.0..=1.0 + 1e-8).contains(&p)) {
                return Err(CombineError::InvalidNetwork(format!("{} slot {}: posterior out of range", self.utt_id, i)));
            }
            if (s.total() - 1.0).abs() > 1e-8 {
                return Err(CombineError::InvalidNetwork(format!("{} slot {}: sums to {}", self.utt_id, i, s.total())));
            }
        }
        Ok(())
    }
}

/// Per-slot argmax; the empty token emits nothing.
pub fn cn_decode(cn: &ConfusionNetwork) -> Vec<String> {
    cn.slots.iter().filter_map(|s| s.best()).filter(|&t| t != EPS).map(String::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnCosts {
    /// Word against a slot lacking it, or against a gap.
    pub mismatch: f64,
    /// Gap against a slot that already carries empty-token mass.
    pub eps: f64,
}

impl Default for CnCosts {
    fn default() -> Self {
        Self { mismatch: 1.0, eps: 0.5 }
    }
}

#[derive(Clone, Copy)]
enum Step {
    Diag,
    SkipSlot,
    Insert,
}

/// Generic edit-distance table over `n` slots and `m` items. Ties prefer
/// the diagonal, then skipping a slot, then inserting.
fn edit_path(
    n: usize,
    m: usize,
    diag: impl Fn(usize, usize) -> f64,
    skip: impl Fn(usize) -> f64,
    insert: impl Fn(usize) -> f64,
) -> Vec<Step> {
    let mut d = vec![vec![f64::INFINITY; m + 1]; n + 1];
    let mut back = vec![vec![Step::Diag; m + 1]; n + 1];
    d[0][0] = 0.0;
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = (f64::INFINITY, Step::Diag);
            if i > 0 && j > 0 {
                best = (d[i - 1][j - 1] + diag(i - 1, j - 1), Step::Diag);
            }
            if i > 0 {
                let c = d[i - 1][j] + skip(i - 1);
                if c < best.0 {
                    best = (c, Step::SkipSlot);
                }
            }
            if j > 0 {
                let c = d[i][j - 1] + insert(j - 1);
                if c < best.0 {
                    best = (c, Step::Insert);
                }
            }
            d[i][j] = best.0;
            back[i][j] = best.1;
        }
    }
    let (mut i, mut j) = (n, m);
    let mut path = Vec::with_capacity(n + m);
    while i > 0 || j > 0 {
        let s = back[i][j];
        match s {
            Step::Diag => {
                i -= 1;
                j -= 1;
            }
            Step::SkipSlot => i -= 1,
            Step::Insert => j -= 1,
        }
        path.push(s);
    }
    path.reverse();
    path
}

/// Network from hypotheses with given posteriors. Hypotheses are added in
/// order of decreasing posterior (stable), each aligned to the slots built
/// so far.
pub fn build_from_posteriors(utt_id: &str, hyps: &[(Vec<String>, f64)], costs: &CnCosts) -> Result<ConfusionNetwork, CombineError> {
    if hyps.is_empty() {
        return Err(CombineError::EmptyInput);
    }
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.sort_by(|&a, &b| hyps[b].1.total_cmp(&hyps[a].1));
    let mut slots: Vec<Slot> = Vec::new();
    let mut mass = 0.0;
    for &k in &order {
        let (words, p) = (&hyps[k].0, hyps[k].1);
        let path = edit_path(
            slots.len(),
            words.len(),
            |i, j| if slots[i].get(&words[j]) > 0.0 { 0.0 } else { costs.mismatch },
            |i| if slots[i].get(EPS) > 0.0 { costs.eps } else { costs.mismatch },
            |_| costs.mismatch,
        );
        let mut next = Vec::with_capacity(path.len());
        let (mut i, mut j) = (0, 0);
        for step in path {
            match step {
                Step::Diag => {
                    let mut s = std::mem::take(&mut slots[i]);
                    s.add(&words[j], p);
                    next.push(s);
                    i += 1;
                    j += 1;
                }
                Step::SkipSlot => {
                    let mut s = std::mem::take(&mut slots[i]);
                    s.add(EPS, p);
                    next.push(s);
                    i += 1;
                }
                Step::Insert => {
                    let mut s = Slot::default();
                    if mass > 0.0 {
                        s.add(EPS, mass);
                    }
                    s.add(&words[j], p);
                    next.push(s);
                    j += 1;
                }
            }
        }
        slots = next;
        mass += p;
    }
    Ok(ConfusionNetwork { utt_id: utt_id.to_string(), slots: slots.into_iter().map(Slot::normalized).collect() })
}

/// Hypothesis posteriors: softmax of `posterior_scale` times the combined
/// score under `weights`.
pub fn hypothesis_posteriors(list: &NBestList, weights: &ScoreWeights, posterior_scale: f64) -> Result<Vec<f64>, CombineError> {
    let s: Vec<f64> = list
        .hypotheses
        .iter()
        .map(|h| score_hypothesis(h, weights).map(|x| posterior_scale * x))
        .collect::<Result<_, _>>()?;
    Ok(crate::numeric::softmax(ndarray::ArrayView1::from(&s)))
}

pub fn build_confusion_network(
    list: &NBestList,
    weights: &ScoreWeights,
    posterior_scale: f64,
    costs: &CnCosts,
) -> Result<ConfusionNetwork, CombineError> {
    let post = hypothesis_posteriors(list, weights, posterior_scale)?;
    let hyps: Vec<(Vec<String>, f64)> = list.hypotheses.iter().zip(post).map(|(h, p)| (h.words.clone(), p)).collect();
    build_from_posteriors(&list.utt_id, &hyps, costs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CombinationWeights(pub Vec<f64>);

impl CombinationWeights {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Normalizes non-negative raw weights.
    pub fn from_raw(raw: &[f64]) -> Result<Self, CombineError> {
        let t: f64 = raw.iter().sum();
        if raw.iter().any(|&w| !(w >= 0.0 && w.is_finite())) || t <= 0.0 {
            return Err(CombineError::InvalidWeights(format!("{:?}", raw)));
        }
        Ok(Self(raw.iter().map(|w| w / t).collect()))
    }

    pub fn validate(&self) -> Result<(), CombineError> {
        if self.0.is_empty() || self.0.iter().any(|&w| !(w >= 0.0)) {
            return Err(CombineError::InvalidWeights(format!("{:?}", self.0)));
        }
        let t: f64 = self.0.iter().sum();
        if (t - 1.0).abs() > 1e-12 {
            return Err(CombineError::InvalidWeights(format!("sum {}", t)));
        }
        Ok(())
    }
}

/// Several networks of one utterance aligned position by position. Each
/// column holds one slot per system; a system absent at a position has a
/// certain empty token there.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedNetworks {
    pub utt_id: String,
    pub columns: Vec<Vec<Slot>>,
}

impl AlignedNetworks {
    pub fn num_systems(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    fn blend_column(col: &[Slot], w: &[f64]) -> Slot {
        let mut s = Slot::default();
        for (slot, &wk) in col.iter().zip(w) {
            if wk > 0.0 {
                for (t, &p) in &slot.tokens {
                    s.add(t, wk * p);
                }
            }
        }
        s
    }

    /// Weighted posterior blend, renormalized per slot.
    pub fn blend(&self, w: &CombinationWeights) -> ConfusionNetwork {
        ConfusionNetwork {
            utt_id: self.utt_id.clone(),
            slots: self.columns.iter().map(|c| Self::blend_column(c, &w.0).normalized()).collect(),
        }
    }
}

fn overlap(a: &Slot, a_total: f64, b: &Slot) -> f64 {
    a.tokens.iter().map(|(t, &p)| (p / a_total).min(b.get(t))).sum()
}

/// Aligns networks in order, each against the weighted blend of those
/// already placed. Slot distance is one minus the shared probability mass;
/// leaving a slot unmatched costs one minus its empty-token mass.
pub fn align_networks(cns: &[&ConfusionNetwork], weights: &[f64]) -> Result<AlignedNetworks, CombineError> {
    let Some(first) = cns.first() else {
        return Err(CombineError::EmptyInput);
    };
    if let Some(c) = cns.iter().find(|c| c.utt_id != first.utt_id) {
        return Err(CombineError::UtteranceMismatch(first.utt_id.clone(), c.utt_id.clone()));
    }
    let mut columns: Vec<Vec<Slot>> = first.slots.iter().map(|s| vec![s.clone()]).collect();
    let mut acc: Vec<Slot> = columns.iter().map(|c| AlignedNetworks::blend_column(c, weights)).collect();
    let mut w_total = weights[0];
    for (k, cn) in cns.iter().enumerate().skip(1) {
        let denom = if w_total > 0.0 { w_total } else { 1.0 };
        let acc_ref = &acc;
        let path = edit_path(
            acc.len(),
            cn.slots.len(),
            |i, j| 1.0 - overlap(&acc_ref[i], denom, &cn.slots[j]),
            |i| 1.0 - acc_ref[i].get(EPS) / denom,
            |j| 1.0 - cn.slots[j].get(EPS),
        );
        let mut next_cols = Vec::with_capacity(path.len());
        let mut next_acc = Vec::with_capacity(path.len());
        let (mut i, mut j) = (0, 0);
        let wk = weights[k];
        for step in path {
            match step {
                Step::Diag => {
                    let mut col = std::mem::take(&mut columns[i]);
                    let mut a = std::mem::take(&mut acc[i]);
                    for (t, &p) in &cn.slots[j].tokens {
                        a.add(t, wk * p);
                    }
                    col.push(cn.slots[j].clone());
                    next_cols.push(col);
                    next_acc.push(a);
                    i += 1;
                    j += 1;
                }
                Step::SkipSlot => {
                    let mut col = std::mem::take(&mut columns[i]);
                    let mut a = std::mem::take(&mut acc[i]);
                    a.add(EPS, wk);
                    col.push(Slot::single(EPS));
                    next_cols.push(col);
                    next_acc.push(a);
                    i += 1;
                }
                Step::Insert => {
                    let mut col = vec![Slot::single(EPS); k];
                    col.push(cn.slots[j].clone());
                    let mut a = Slot::default();
                    if w_total > 0.0 {
                        a.add(EPS, w_total);
                    }
                    for (t, &p) in &cn.slots[j].tokens {
                        a.add(t, wk * p);
                    }
                    next_cols.push(col);
                    next_acc.push(a);
                    j += 1;
                }
            }
        }
        columns = next_cols;
        acc = next_acc;
        w_total += wk;
    }
    Ok(AlignedNetworks { utt_id: first.utt_id.clone(), columns })
}

/// Weighted combination of one utterance's networks. Systems with zero
/// weight take no part in the alignment.
pub fn rover_combine(cns: &[&ConfusionNetwork], weights: &CombinationWeights) -> Result<ConfusionNetwork, CombineError> {
    weights.validate()?;
    if cns.len() != weights.0.len() {
        return Err(CombineError::InvalidWeights(format!("{} weights for {} networks", weights.0.len(), cns.len())));
    }
    if let Some(c) = cns.iter().find(|c| c.utt_id != cns[0].utt_id) {
        return Err(CombineError::UtteranceMismatch(cns[0].utt_id.clone(), c.utt_id.clone()));
    }
    let (kept, w): (Vec<&ConfusionNetwork>, Vec<f64>) =
        cns.iter().zip(&weights.0).filter(|(_, &w)| w > 0.0).map(|(c, &w)| (*c, w)).unzip();
    if let [only] = kept[..] {
        // a single contributor is its own blend; skip the rounding of a
        // second normalization
        return Ok(only.clone());
    }
    let aligned = align_networks(&kept, &w)?;
    Ok(aligned.blend(&CombinationWeights(w)))
}

/// One system's networks keyed by utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub id: String,
    pub cns: BTreeMap<String, ConfusionNetwork>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSet {
    pub systems: Vec<System>,
    pub refs: BTreeMap<String, Vec<String>>,
}

impl SystemSet {
    pub fn validate(&self) -> Result<(), CombineError> {
        let Some(first) = self.systems.first() else {
            return Err(CombineError::EmptyInput);
        };
        for s in &self.systems {
            if !s.cns.keys().eq(first.cns.keys()) {
                return Err(CombineError::UtteranceMismatch(first.id.clone(), s.id.clone()));
            }
        }
        if let Some(u) = first.cns.keys().find(|u| !self.refs.contains_key(*u)) {
            return Err(CombineError::UtteranceMismatch(u.clone(), "references".into()));
        }
        Ok(())
    }

    fn utterances(&self) -> Vec<&String> {
        self.systems[0].cns.keys().collect()
    }

    /// Combined networks for a subset of systems.
    pub fn combine(&self, subset: &[usize], w: &CombinationWeights) -> Result<BTreeMap<String, ConfusionNetwork>, CombineError> {
        self.utterances()
            .par_iter()
            .map(|u| {
                let cns: Vec<&ConfusionNetwork> = subset.iter().map(|&k| &self.systems[k].cns[*u]).collect();
                Ok(((*u).clone(), rover_combine(&cns, w)?))
            })
            .collect()
    }

    /// Corpus WER (percent) of a subset under given weights.
    pub fn dev_wer(&self, subset: &[usize], w: &CombinationWeights, score: &ScoreConfig) -> Result<f64, CombineError> {
        wer_of_networks(&self.combine(subset, w)?, &self.refs, score)
    }
}

/// Corpus WER (percent) of decoded networks.
pub fn wer_of_networks(
    cns: &BTreeMap<String, ConfusionNetwork>,
    refs: &BTreeMap<String, Vec<String>>,
    score: &ScoreConfig,
) -> Result<f64, CombineError> {
    let mut errors = 0;
    let mut words = 0;
    for (u, cn) in cns {
        let r = refs.get(u).ok_or_else(|| CombineError::UtteranceMismatch(u.clone(), "references".into()))?;
        let rep = score_utterance(r, &cn_decode(cn), score)?.1;
        errors += rep.counts.errors();
        words += rep.counts.ref_words;
    }
    if words == 0 {
        return Err(CombineError::EmptyInput);
    }
    Ok(100.0 * errors as f64 / words as f64)
}

/// Correct token at each aligned position: the reference word aligned to
/// it, or the empty token where the reference has nothing.
fn reference_tokens(aligned: &AlignedNetworks, reference: &[String], align_w: &[f64]) -> Vec<String> {
    let blended: Vec<Slot> = aligned.columns.iter().map(|c| AlignedNetworks::blend_column(c, align_w).normalized()).collect();
    let path = edit_path(
        blended.len(),
        reference.len(),
        |i, j| 1.0 - blended[i].get(&reference[j]),
        |i| 1.0 - blended[i].get(EPS),
        |_| 1.0,
    );
    let mut out = Vec::with_capacity(blended.len());
    let mut j = 0;
    for step in path {
        match step {
            Step::Diag => {
                out.push(reference[j].clone());
                j += 1;
            }
            Step::SkipSlot => out.push(EPS.to_string()),
            Step::Insert => j += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub weights: CombinationWeights,
    /// Un-smoothed EM estimate.
    pub raw: CombinationWeights,
    /// Objective after each iteration, starting with the initial weights.
    pub objective: Vec<f64>,
}

pub const EM_MAX_ITERS: usize = 50;
pub const EM_TOLERANCE: f64 = 1e-6;

/// EM estimate of mixture weights maximizing the summed log of the
/// weighted correct-token probability over reference-aligned positions.
/// Networks are aligned with uniform weights so that the positions are
/// fixed for the whole run. The result is `smooth * em + (1 - smooth) *
/// init`.
pub fn em_weights(
    per_utt: &[Vec<&ConfusionNetwork>],
    refs: &[&[String]],
    init: &CombinationWeights,
    smooth: f64,
) -> Result<EmResult, CombineError> {
    init.validate()?;
    let n = init.0.len();
    if n == 1 {
        return Ok(EmResult { weights: init.clone(), raw: init.clone(), objective: Vec::new() });
    }
    if !(0.0..=1.0).contains(&smooth) {
        return Err(CombineError::InvalidWeights(format!("smooth {}", smooth)));
    }
    let uniform = CombinationWeights::uniform(n);
    // rows of per-system correct-token probabilities
    let rows: Vec<Vec<f64>> = per_utt
        .par_iter()
        .zip(refs)
        .map(|(cns, r)| {
            if cns.len() != n {
                return Err(CombineError::InvalidWeights(format!("{} weights for {} systems", n, cns.len())));
            }
            let a = align_networks(cns, &uniform.0)?;
            let toks = reference_tokens(&a, r, &uniform.0);
            Ok(a.columns.iter().zip(&toks).map(|(col, t)| col.iter().map(|s| s.get(t)).collect::<Vec<f64>>()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, CombineError>>()?
        .into_iter()
        .flatten()
        .filter(|p: &Vec<f64>| p.iter().any(|&x| x > 0.0))
        .collect();
    if rows.is_empty() {
        return Err(CombineError::DegenerateInput);
    }
    let objective = |w: &[f64]| -> f64 {
        crate::numeric::compensated_sum(rows.iter().map(|p| p.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().ln()))
    };
    let mut w = init.0.clone();
    let mut trace = vec![objective(&w)];
    for _ in 0..EM_MAX_ITERS {
        let mut resp = vec![0.0; n];
        for p in &rows {
            let z: f64 = p.iter().zip(&w).map(|(a, b)| a * b).sum();
            if z > 0.0 {
                for k in 0..n {
                    resp[k] += w[k] * p[k] / z;
                }
            }
        }
        let t: f64 = resp.iter().sum();
        w = resp.iter().map(|r| r / t).collect();
        let obj = objective(&w);
        let prev = *trace.last().unwrap_or(&f64::NEG_INFINITY);
        trace.push(obj);
        if obj - prev < EM_TOLERANCE {
            break;
        }
    }
    let raw = CombinationWeights::from_raw(&w)?;
    let mixed: Vec<f64> = raw.0.iter().zip(&init.0).map(|(e, i)| smooth * e + (1.0 - smooth) * i).collect();
    Ok(EmResult { weights: CombinationWeights::from_raw(&mixed)?, raw, objective: trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum WeightSearch {
    /// New systems get a relative weight from the ladder.
    Ladder,
    /// Candidate weights are estimated by EM and smoothed toward the
    /// previous combination.
    Em { smooth: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyConfig {
    pub ladder: Vec<f64>,
    pub search: WeightSearch,
    pub score: ScoreConfig,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self { ladder: DEFAULT_LADDER.to_vec(), search: WeightSearch::Ladder, score: ScoreConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRound {
    pub system: String,
    pub relative_weight: f64,
    pub weights: CombinationWeights,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyResult {
    /// Indices into the pool, in order of selection.
    pub selected: Vec<usize>,
    pub ids: Vec<String>,
    pub weights: CombinationWeights,
    /// Dev WER of the starting system and after each accepted round.
    pub trace: Vec<f64>,
    pub rounds: Vec<SelectionRound>,
}

impl fmt::Display for GreedyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:<20} {:>8} {:>8}  weights", "round", "system", "rel.w", "WER")?;
        writeln!(f, "{:<6} {:<20} {:>8} {:>8.2}  1.000", 0, self.ids[0], "1.0", self.trace[0])?;
        for (i, r) in self.rounds.iter().enumerate() {
            let ws: Vec<String> = r.weights.0.iter().map(|w| format!("{:.3}", w)).collect();
            writeln!(f, "{:<6} {:<20} {:>8} {:>8.2}  {}", i + 1, r.system, r.relative_weight, r.wer, ws.join(" "))?;
        }
        Ok(())
    }
}

/// Greedy forward selection on the dev references. Starts from the best
/// single system (earliest on ties). Each round tries every unused system
/// at each ladder weight in turn, stopping at the first ladder step where
/// some candidate strictly lowers dev WER; the best such candidate is
/// added. Under EM search the candidate weights come from `em_weights`.
pub fn greedy_select(pool: &SystemSet, cfg: &GreedyConfig) -> Result<GreedyResult, CombineError> {
    pool.validate()?;
    let mut best_single = (f64::INFINITY, 0);
    for k in 0..pool.systems.len() {
        let e = pool.dev_wer(&[k], &CombinationWeights(vec![1.0]), &cfg.score)?;
        if e < best_single.0 {
            best_single = (e, k);
        }
    }
    let mut selected = vec![best_single.1];
    let mut raw = vec![1.0];
    let mut weights = CombinationWeights(vec![1.0]);
    let mut trace = vec![best_single.0];
    let mut rounds = Vec::new();
    let utts = pool.utterances();
    let refs: Vec<&[String]> = utts.iter().map(|u| pool.refs[*u].as_slice()).collect();
    loop {
        let cur = *trace.last().unwrap_or(&f64::INFINITY);
        let mut accepted: Option<(f64, usize, f64, Vec<f64>, CombinationWeights)> = None;
        for &rel in &cfg.ladder {
            for k in 0..pool.systems.len() {
                if selected.contains(&k) {
                    continue;
                }
                let mut subset = selected.clone();
                subset.push(k);
                let mut cand_raw = raw.clone();
                cand_raw.push(rel);
                let mut w = CombinationWeights::from_raw(&cand_raw)?;
                if let WeightSearch::Em { smooth } = cfg.search {
                    let per_utt: Vec<Vec<&ConfusionNetwork>> =
                        utts.iter().map(|u| subset.iter().map(|&s| &pool.systems[s].cns[*u]).collect()).collect();
                    w = em_weights(&per_utt, &refs, &w, smooth)?.weights;
                }
                let e = pool.dev_wer(&subset, &w, &cfg.score)?;
                if e < cur && accepted.as_ref().is_none_or(|a| e < a.0) {
                    accepted = Some((e, k, rel, cand_raw, w));
                }
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((e, k, rel, cand_raw, w)) = accepted else { break };
        log::info!("combination adds {} at relative weight {}: dev WER {:.3}", pool.systems[k].id, rel, e);
        selected.push(k);
        raw = match cfg.search {
            WeightSearch::Ladder => cand_raw,
            WeightSearch::Em { .. } => w.0.clone(),
        };
        weights = w.clone();
        trace.push(e);
        rounds.push(SelectionRound { system: pool.systems[k].id.clone(), relative_weight: rel, weights: w, wer: e });
    }
    Ok(GreedyResult {
        ids: selected.iter().map(|&k| pool.systems[k].id.clone()).collect(),
        selected,
        weights,
        trace,
        rounds,
    })
}

/// Equal-weight combination of one group into a single system.
pub fn combine_group(group: &[System], id: &str) -> Result<System, CombineError> {
    let Some(first) = group.first() else {
        return Err(CombineError::EmptyInput);
    };
    let w = CombinationWeights::uniform(group.len());
    let cns = first
        .cns
        .keys()
        .map(|u| {
            let cs: Vec<&ConfusionNetwork> = group
                .iter()
                .map(|s| s.cns.get(u).ok_or_else(|| CombineError::UtteranceMismatch(first.id.clone(), s.id.clone())))
                .collect::<Result<_, _>>()?;
            Ok((u.clone(), rover_combine(&cs, &w)?))
        })
        .collect::<Result<_, CombineError>>()?;
    Ok(System { id: id.to_string(), cns })
}

/// Each group is merged with equal weights, then the merged systems enter
/// greedy selection as single systems.
pub fn two_stage_combine(
    groups: &[Vec<System>],
    refs: &BTreeMap<String, Vec<String>>,
    cfg: &GreedyConfig,
) -> Result<(GreedyResult, BTreeMap<String, ConfusionNetwork>), CombineError> {
    let systems = groups
        .iter()
        .map(|g| {
            let id = g.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join("+");
            combine_group(g, &id)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let set = SystemSet { systems, refs: refs.clone() };
    let r = greedy_select(&set, cfg)?;
    let cns = set.combine(&r.selected, &r.weights)?;
    Ok((r, cns))
}

pub fn read_cn_jsonl<R: BufRead>(input: R) -> Result<Vec<ConfusionNetwork>, CombineError> {
    let mut out = Vec::new();
    for (ln, line) in input.lines().enumerate() {
        let line = line.map_err(FormatError::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let cn: ConfusionNetwork = serde_json::from_str(&line)
            .map_err(|e| FormatError::Malformed(format!("line {}: {}", ln + 1, e)))?;
        cn.validate()?;
        out.push(cn);
    }
    Ok(out)
}

pub fn write_cn_jsonl<W: Write>(mut out: W, cns: &[ConfusionNetwork]) -> Result<(), FormatError> {
    for cn in cns {
        serde_json::to_writer(&mut out, cn)?;
        writeln!(out)?;
    }
    Ok(())
}
