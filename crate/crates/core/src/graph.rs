//! Mixed-history senone language model and the sparse denominator graph.
//!
//! Frame-level senone alignments are run-length compressed, a senone-level
//! N-gram is estimated whose history is the previous phone plus the senones
//! seen so far inside the current phone, and the model is expanded into an
//! acceptor whose states are histories. HMM self-loop and exit probabilities
//! come from transition counts on the uncompressed alignments.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;
use crate::numeric::{fmt_f64, log_add, log_sum_exp};

/// Number of HMM states per phone in the toolkit's triphone topology.
pub const STATES_PER_PHONE: usize = 3;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("empty input")]
    EmptyInput,
    #[error("senone {0} has no phone mapping")]
    UnknownSenone(SenoneId),
    #[error("senone {0} is missing from the transition model")]
    IncompleteTransitionModel(SenoneId),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SenoneId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhoneId(pub u32);

impl SenoneId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SenoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for PhoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

// ---------------------------------------------------------------------------
// Senone inventory and alignments
// ---------------------------------------------------------------------------

/// Senone → phone mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenoneTable {
    phone_of: BTreeMap<SenoneId, PhoneId>,
}

impl SenoneTable {
    pub fn from_pairs<I: IntoIterator<Item = (SenoneId, PhoneId)>>(pairs: I) -> Self {
        Self { phone_of: pairs.into_iter().collect() }
    }

    pub fn phone_of(&self, s: SenoneId) -> Option<PhoneId> {
        self.phone_of.get(&s).copied()
    }

    pub fn len(&self) -> usize {
        self.phone_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phone_of.is_empty()
    }

    /// Largest senone id plus one; the width of a log-likelihood matrix.
    pub fn inventory_size(&self) -> usize {
        self.phone_of.keys().next_back().map_or(0, |s| s.index() + 1)
    }

    pub fn senones(&self) -> impl Iterator<Item = SenoneId> + '_ {
        self.phone_of.keys().copied()
    }

    /// Reads `senone_id phone_id` pairs, one per line.
    pub fn read<R: BufRead>(input: R) -> Result<Self, FormatError> {
        let mut phone_of = BTreeMap::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            if toks.len() != 2 {
                return Err(FormatError::Malformed(format!("senone table line {}: {:?}", n + 1, line)));
            }
            let s = toks[0]
                .parse::<u32>()
                .map_err(|_| FormatError::Malformed(format!("bad senone id {:?}", toks[0])))?;
            let p = toks[1]
                .parse::<u32>()
                .map_err(|_| FormatError::Malformed(format!("bad phone id {:?}", toks[1])))?;
            phone_of.insert(SenoneId(s), PhoneId(p));
        }
        Ok(Self { phone_of })
    }

    pub fn write<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for (s, p) in &self.phone_of {
            writeln!(out, "{} {}", s, p)?;
        }
        Ok(())
    }
}

/// Frame-level senone sequence of one utterance (one entry per 10 ms frame).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenoneAlignment {
    pub utt_id: String,
    pub frames: Vec<SenoneId>,
}

impl SenoneAlignment {
    /// Validates that the alignment is non-empty and every senone has a phone.
    pub fn new(utt_id: impl Into<String>, frames: Vec<SenoneId>, table: &SenoneTable) -> Result<Self, GraphError> {
        if frames.is_empty() {
            return Err(GraphError::EmptyInput);
        }
        if let Some(&s) = frames.iter().find(|&&s| table.phone_of(s).is_none()) {
            return Err(GraphError::UnknownSenone(s));
        }
        Ok(Self { utt_id: utt_id.into(), frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Reads an alignment file: `utt_id senone senone ...` per line.
pub fn read_alignments<R: BufRead>(input: R) -> Result<Vec<(String, Vec<SenoneId>)>, FormatError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        let mut toks = line.split_whitespace();
        let Some(utt) = toks.next() else { continue };
        let frames = toks
            .map(|t| {
                t.parse::<u32>()
                    .map(SenoneId)
                    .map_err(|_| FormatError::Malformed(format!("bad senone id {:?} in {}", t, utt)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push((utt.to_string(), frames));
    }
    Ok(out)
}

pub fn write_alignments<W: Write>(out: &mut W, alignments: &[SenoneAlignment]) -> std::io::Result<()> {
    for a in alignments {
        write!(out, "{}", a.utt_id)?;
        for s in &a.frames {
            write!(out, " {}", s)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Alignment with consecutive repeats collapsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedSequence {
    pub utt_id: String,
    pub runs: Vec<SenoneId>,
}

/// Collapses each run of identical consecutive senones to a single entry.
pub fn compress_senones(alignment: &SenoneAlignment) -> Result<CompressedSequence, GraphError> {
    if alignment.frames.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    let mut runs = alignment.frames.clone();
    runs.dedup();
    Ok(CompressedSequence { utt_id: alignment.utt_id.clone(), runs })
}

// ---------------------------------------------------------------------------
// Mixed-history LM
// ---------------------------------------------------------------------------

/// Previous phone plus the senones emitted so far within the current phone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MixedHistory {
    pub prev_phone: Option<PhoneId>,
    pub senones_in_phone: Vec<SenoneId>,
}

impl MixedHistory {
    /// The utterance-initial history.
    pub fn start() -> Self {
        Self { prev_phone: None, senones_in_phone: Vec::new() }
    }

    pub fn is_start(&self) -> bool {
        self.prev_phone.is_none() && self.senones_in_phone.is_empty()
    }

    pub fn last_senone(&self) -> Option<SenoneId> {
        self.senones_in_phone.last().copied()
    }

    /// History after emitting `next`.
    ///
    /// A new phone instance starts when the phone changes or when the
    /// current phone already holds `cap` senones.
    pub fn advance(&self, next: SenoneId, table: &SenoneTable, cap: usize) -> Result<Self, GraphError> {
        let next_phone = table.phone_of(next).ok_or(GraphError::UnknownSenone(next))?;
        match self.last_senone() {
            None => Ok(Self { prev_phone: self.prev_phone, senones_in_phone: vec![next] }),
            Some(last) => {
                let cur_phone = table.phone_of(last).ok_or(GraphError::UnknownSenone(last))?;
                if cur_phone == next_phone && self.senones_in_phone.len() < cap {
                    let mut senones_in_phone = self.senones_in_phone.clone();
                    senones_in_phone.push(next);
                    Ok(Self { prev_phone: self.prev_phone, senones_in_phone })
                } else {
                    Ok(Self { prev_phone: Some(cur_phone), senones_in_phone: vec![next] })
                }
            }
        }
    }
}

/// One outgoing LM transition: the predicted senone, its probability and
/// the history reached after emitting it.
#[derive(Debug, Clone, PartialEq)]
pub struct LmTransition {
    pub senone: SenoneId,
    pub prob: f64,
    pub next: MixedHistory,
}

/// Unsmoothed variable-length senone N-gram over mixed histories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedHistoryLM {
    states_per_phone: usize,
    table: SenoneTable,
    counts: BTreeMap<MixedHistory, BTreeMap<SenoneId, u64>>,
    /// Phone-initial senone counts keyed by the preceding phone (`None` at
    /// utterance start). Backs the `(prev_phone, [])` back-off states.
    boundary_counts: BTreeMap<Option<PhoneId>, BTreeMap<SenoneId, u64>>,
}

fn ratio_distribution(counts: &BTreeMap<SenoneId, u64>) -> Vec<(SenoneId, f64)> {
    let total: u64 = counts.values().sum();
    counts.iter().map(|(&s, &c)| (s, c as f64 / total as f64)).collect()
}

impl MixedHistoryLM {
    pub fn states_per_phone(&self) -> usize {
        self.states_per_phone
    }

    pub fn senone_table(&self) -> &SenoneTable {
        &self.table
    }

    pub fn histories(&self) -> impl Iterator<Item = &MixedHistory> {
        self.counts.keys()
    }

    pub fn counts(&self, h: &MixedHistory) -> Option<&BTreeMap<SenoneId, u64>> {
        self.counts.get(h)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Observed conditional distribution `P(s | h)`; `None` for unseen histories.
    pub fn conditional(&self, h: &MixedHistory) -> Option<Vec<(SenoneId, f64)>> {
        self.counts.get(h).map(ratio_distribution)
    }

    pub fn prob(&self, h: &MixedHistory, s: SenoneId) -> f64 {
        self.counts.get(h).map_or(0.0, |c| {
            let total: u64 = c.values().sum();
            c.get(&s).map_or(0.0, |&n| n as f64 / total as f64)
        })
    }

    /// Outgoing transitions from `h`. A history never followed by anything
    /// in training backs off to `(prev_phone, [])`: its arcs are those of the
    /// phone-level back-off state, i.e. the distribution of phone-initial
    /// senones observed after `prev_phone`.
    pub fn transitions(&self, h: &MixedHistory) -> Result<Vec<LmTransition>, GraphError> {
        if let Some(c) = self.counts.get(h) {
            return ratio_distribution(c)
                .into_iter()
                .map(|(s, p)| {
                    Ok(LmTransition { senone: s, prob: p, next: h.advance(s, &self.table, self.states_per_phone)? })
                })
                .collect();
        }
        let (key, c) = match self.boundary_counts.get(&h.prev_phone) {
            Some(c) => (h.prev_phone, c),
            None => (None, self.boundary_counts.get(&None).ok_or(GraphError::EmptyInput)?),
        };
        Ok(ratio_distribution(c)
            .into_iter()
            .map(|(s, p)| LmTransition {
                senone: s,
                prob: p,
                next: MixedHistory { prev_phone: key, senones_in_phone: vec![s] },
            })
            .collect())
    }

    /// Distribution of the back-off state `(prev_phone, [])`.
    pub fn backoff_conditional(&self, prev_phone: Option<PhoneId>) -> Option<Vec<(SenoneId, f64)>> {
        self.boundary_counts.get(&prev_phone).map(ratio_distribution)
    }
}

/// Estimates the mixed-history LM from compressed senone sequences.
pub fn estimate_mixed_history_lm(
    sequences: &[CompressedSequence],
    table: &SenoneTable,
    states_per_phone: usize,
) -> Result<MixedHistoryLM, GraphError> {
    if sequences.iter().all(|s| s.runs.is_empty()) {
        return Err(GraphError::EmptyInput);
    }
    let mut counts: BTreeMap<MixedHistory, BTreeMap<SenoneId, u64>> = BTreeMap::new();
    let mut boundary_counts: BTreeMap<Option<PhoneId>, BTreeMap<SenoneId, u64>> = BTreeMap::new();
    for seq in sequences {
        let mut h = MixedHistory::start();
        for &s in &seq.runs {
            let next = h.advance(s, table, states_per_phone)?;
            *counts.entry(h.clone()).or_default().entry(s).or_insert(0) += 1;
            if next.senones_in_phone.len() == 1 {
                *boundary_counts.entry(next.prev_phone).or_default().entry(s).or_insert(0) += 1;
            }
            h = next;
        }
    }
    Ok(MixedHistoryLM { states_per_phone, table: table.clone(), counts, boundary_counts })
}

// ---------------------------------------------------------------------------
// HMM transition model
// ---------------------------------------------------------------------------

/// Per-senone self-loop / exit counts and probabilities.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TransitionModel {
    /// senone → (self-loop count, exit count)
    counts: BTreeMap<SenoneId, (u64, u64)>,
}

impl TransitionModel {
    /// Counts transitions on frame-level alignments. The utterance-final
    /// frame counts as an exit, so every seen senone has at least one exit.
    pub fn estimate(alignments: &[SenoneAlignment]) -> Self {
        let mut counts: BTreeMap<SenoneId, (u64, u64)> = BTreeMap::new();
        for a in alignments {
            for (t, &s) in a.frames.iter().enumerate() {
                let e = counts.entry(s).or_insert((0, 0));
                match a.frames.get(t + 1) {
                    Some(&n) if n == s => e.0 += 1,
                    _ => e.1 += 1,
                }
            }
        }
        Self { counts }
    }

    pub fn from_probs<I: IntoIterator<Item = (SenoneId, f64)>>(self_loop_probs: I, denominator: u64) -> Self {
        let counts = self_loop_probs
            .into_iter()
            .map(|(s, p)| {
                let sl = (p * denominator as f64).round() as u64;
                (s, (sl, denominator - sl))
            })
            .collect();
        Self { counts }
    }

    pub fn contains(&self, s: SenoneId) -> bool {
        self.counts.contains_key(&s)
    }

    pub fn self_loop_prob(&self, s: SenoneId) -> Option<f64> {
        self.counts.get(&s).map(|&(a, b)| a as f64 / (a + b) as f64)
    }

    pub fn exit_prob(&self, s: SenoneId) -> Option<f64> {
        self.counts.get(&s).map(|&(a, b)| b as f64 / (a + b) as f64)
    }

    pub fn counts(&self, s: SenoneId) -> Option<(u64, u64)> {
        self.counts.get(&s).copied()
    }

    pub fn senones(&self) -> impl Iterator<Item = SenoneId> + '_ {
        self.counts.keys().copied()
    }
}

// ---------------------------------------------------------------------------
// Denominator graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub dst: usize,
    pub senone: SenoneId,
    pub logprob: f64,
}

/// ε-free weighted acceptor over senones, stored as CSR by source state.
/// Self-loops are kept apart from the CSR arcs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenominatorGraph {
    num_states: usize,
    start: usize,
    final_weights: Vec<f64>,
    row_ptr: Vec<usize>,
    arcs: Vec<Arc>,
    self_loops: Vec<Option<(SenoneId, f64)>>,
}

impl DenominatorGraph {
    /// Assembles a graph from `(src, dst, senone, logprob)` triplets.
    /// Arcs with `src == dst` become self-loops; parallel arcs sharing
    /// `(src, dst, senone)` are merged by log-addition.
    pub fn from_arcs(
        num_states: usize,
        start: usize,
        final_weights: Vec<f64>,
        triplets: impl IntoIterator<Item = (usize, usize, SenoneId, f64)>,
    ) -> Result<Self, GraphError> {
        if num_states == 0 || start >= num_states || final_weights.len() != num_states {
            return Err(GraphError::EmptyInput);
        }
        let mut merged: BTreeMap<(usize, usize, SenoneId), f64> = BTreeMap::new();
        for (src, dst, s, lp) in triplets {
            if src >= num_states || dst >= num_states {
                return Err(FormatError::Malformed(format!("arc {}->{} out of range", src, dst)).into());
            }
            let e = merged.entry((src, dst, s)).or_insert(f64::NEG_INFINITY);
            *e = log_add(*e, lp);
        }
        let mut self_loops: Vec<Option<(SenoneId, f64)>> = vec![None; num_states];
        let mut by_src: Vec<Vec<Arc>> = vec![Vec::new(); num_states];
        for ((src, dst, s), lp) in merged {
            if src == dst && self_loops[src].is_none() {
                self_loops[src] = Some((s, lp));
            } else {
                by_src[src].push(Arc { dst, senone: s, logprob: lp });
            }
        }
        let mut row_ptr = Vec::with_capacity(num_states + 1);
        let mut arcs = Vec::new();
        row_ptr.push(0);
        for v in by_src {
            arcs.extend(v);
            row_ptr.push(arcs.len());
        }
        Ok(Self { num_states, start, final_weights, row_ptr, arcs, self_loops })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn final_weight(&self, state: usize) -> f64 {
        self.final_weights[state]
    }

    pub fn final_weights(&self) -> &[f64] {
        &self.final_weights
    }

    /// Non-self-loop arcs leaving `state`.
    pub fn arcs_from(&self, state: usize) -> &[Arc] {
        &self.arcs[self.row_ptr[state]..self.row_ptr[state + 1]]
    }

    pub fn self_loop(&self, state: usize) -> Option<(SenoneId, f64)> {
        self.self_loops[state]
    }

    /// Number of arcs including self-loops.
    pub fn num_arcs(&self) -> usize {
        self.arcs.len() + self.self_loops.iter().filter(|s| s.is_some()).count()
    }

    /// Every arc, self-loops included, as `(src, dst, senone, logprob)`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize, SenoneId, f64)> + '_ {
        (0..self.num_states).flat_map(move |src| {
            self.self_loops[src]
                .map(|(s, lp)| (src, src, s, lp))
                .into_iter()
                .chain(self.arcs_from(src).iter().map(move |a| (src, a.dst, a.senone, a.logprob)))
        })
    }

    /// Log-sum-exp of all outgoing log-probs (arcs plus self-loop) at `state`.
    pub fn outgoing_logsum(&self, state: usize) -> f64 {
        log_sum_exp(
            self.self_loops[state]
                .map(|(_, lp)| lp)
                .into_iter()
                .chain(self.arcs_from(state).iter().map(|a| a.logprob)),
        )
    }

    pub fn senone_labels(&self) -> BTreeSet<SenoneId> {
        self.transitions().map(|(_, _, s, _)| s).collect()
    }

    /// Removes states that are not both reachable from the start and able to
    /// reach a final state, renumbering the survivors in order.
    pub fn trim(&self) -> Self {
        let n = self.num_states;
        let mut fwd = vec![false; n];
        let mut queue = VecDeque::from([self.start]);
        fwd[self.start] = true;
        while let Some(u) = queue.pop_front() {
            for (_, v, _, _) in self.transitions_from(u) {
                if !fwd[v] {
                    fwd[v] = true;
                    queue.push_back(v);
                }
            }
        }
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (u, v, _, _) in self.transitions() {
            preds[v].push(u);
        }
        let mut bwd = vec![false; n];
        for s in 0..n {
            if self.final_weights[s] > f64::NEG_INFINITY {
                bwd[s] = true;
                queue.push_back(s);
            }
        }
        while let Some(v) = queue.pop_front() {
            for &u in &preds[v] {
                if !bwd[u] {
                    bwd[u] = true;
                    queue.push_back(u);
                }
            }
        }
        let keep: Vec<bool> = (0..n).map(|s| fwd[s] && bwd[s]).collect();
        let mut new_id = vec![usize::MAX; n];
        let mut count = 0;
        for s in 0..n {
            if keep[s] || s == self.start {
                new_id[s] = count;
                count += 1;
            }
        }
        let finals = (0..n).filter(|&s| new_id[s] != usize::MAX).map(|s| self.final_weights[s]).collect();
        let triplets: Vec<_> = self
            .transitions()
            .filter(|&(u, v, _, _)| keep[u] && keep[v])
            .map(|(u, v, s, lp)| (new_id[u], new_id[v], s, lp))
            .collect();
        Self::from_arcs(count, new_id[self.start], finals, triplets).expect("trimmed graph is well formed")
    }

    fn transitions_from(&self, src: usize) -> impl Iterator<Item = (usize, usize, SenoneId, f64)> + '_ {
        self.self_loops[src]
            .map(|(s, lp)| (src, src, s, lp))
            .into_iter()
            .chain(self.arcs_from(src).iter().map(move |a| (src, a.dst, a.senone, a.logprob)))
    }

    /// Text dump: `num_states start_state` header, then `src dst senone logprob`
    /// per arc. Self-loops are written with `src == dst`.
    pub fn write_dump<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.num_states, self.start)?;
        for (src, dst, s, lp) in self.transitions() {
            writeln!(out, "{} {} {} {}", src, dst, s, fmt_f64(lp))?;
        }
        Ok(())
    }

    /// Reads a dump written by [`write_dump`](Self::write_dump). All states
    /// are final with weight zero.
    pub fn read_dump<R: BufRead>(input: R) -> Result<Self, GraphError> {
        let mut lines = input.lines();
        let header = loop {
            match lines.next() {
                Some(l) => {
                    let l = l.map_err(FormatError::from)?;
                    if !l.trim().is_empty() {
                        break l;
                    }
                }
                None => return Err(GraphError::EmptyInput),
            }
        };
        let h: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| FormatError::Malformed(format!("bad graph header {:?}", header)))?;
        if h.len() != 2 {
            return Err(FormatError::Malformed(format!("bad graph header {:?}", header)).into());
        }
        let mut triplets = Vec::new();
        for line in lines {
            let line = line.map_err(FormatError::from)?;
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.is_empty() {
                continue;
            }
            if t.len() != 4 {
                return Err(FormatError::Malformed(format!("bad arc line {:?}", line)).into());
            }
            let bad = || FormatError::Malformed(format!("bad arc line {:?}", line));
            triplets.push((
                t[0].parse::<usize>().map_err(|_| bad())?,
                t[1].parse::<usize>().map_err(|_| bad())?,
                SenoneId(t[2].parse::<u32>().map_err(|_| bad())?),
                t[3].parse::<f64>().map_err(|_| bad())?,
            ));
        }
        Self::from_arcs(h[0], h[1], vec![0.0; h[0]], triplets)
    }
}

/// Expands the mixed-history LM into the denominator graph.
///
/// One state per reachable history. An arc from history `h` on senone `s`
/// carries `ln P(s|h) + ln P_exit(last(h))`; a state whose history ends in
/// senone `x` gets a self-loop on `x` with `ln P_self(x)`. The start state
/// has no self-loop and no exit term. Every state is final with weight 0.
pub fn build_denominator_graph(lm: &MixedHistoryLM, tm: &TransitionModel) -> Result<DenominatorGraph, GraphError> {
    if lm.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    let start = MixedHistory::start();
    let mut index: BTreeMap<MixedHistory, usize> = BTreeMap::new();
    let mut order: Vec<MixedHistory> = Vec::new();
    let mut queue = VecDeque::new();
    index.insert(start.clone(), 0);
    order.push(start.clone());
    queue.push_back(start);

    let mut triplets = Vec::new();
    while let Some(h) = queue.pop_front() {
        let src = index[&h];
        let exit = match h.last_senone() {
            Some(x) => {
                let self_p = tm.self_loop_prob(x).ok_or(GraphError::IncompleteTransitionModel(x))?;
                if self_p > 0.0 {
                    triplets.push((src, src, x, self_p.ln()));
                }
                tm.exit_prob(x).ok_or(GraphError::IncompleteTransitionModel(x))?.ln()
            }
            None => 0.0,
        };
        for tr in lm.transitions(&h)? {
            if !tm.contains(tr.senone) {
                return Err(GraphError::IncompleteTransitionModel(tr.senone));
            }
            let dst = match index.get(&tr.next) {
                Some(&d) => d,
                None => {
                    let d = order.len();
                    index.insert(tr.next.clone(), d);
                    order.push(tr.next.clone());
                    queue.push_back(tr.next.clone());
                    d
                }
            };
            triplets.push((src, dst, tr.senone, tr.prob.ln() + exit));
        }
    }
    let n = order.len();
    let graph = DenominatorGraph::from_arcs(n, 0, vec![0.0; n], triplets)?;
    Ok(graph.trim())
}
