//! Lattice-free MMI: forward-backward over the denominator graph, frame
//! posteriors, the MMI objective and its gradient, and cross-entropy
//! regularisation.
//!
//! The alpha and beta recursions are written as products of a sparse
//! transition matrix with a dense per-frame vector, carried out in the log
//! semiring. Every arc consumes exactly one frame.

use std::io::{BufRead, Write};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;
use crate::graph::{DenominatorGraph, SenoneId};
use crate::numeric::{log_add, log_sum_exp, read_matrix, softmax, write_matrix};

#[derive(Debug, Error)]
pub enum SeqTrainError {
    #[error("non-finite value in recursion: {0}")]
    NumericalOverflow(String),
    #[error("graph senone {senone} outside log-likelihood matrix with {columns} columns")]
    LabelMismatch { senone: SenoneId, columns: usize },
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numerator alignment is not accepted by the denominator graph")]
    NumeratorNotAccepted,
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Per-utterance `T × S` acoustic log-scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLikeMatrix {
    pub utt_id: String,
    values: Array2<f64>,
}

impl LogLikeMatrix {
    pub fn new(utt_id: impl Into<String>, values: Array2<f64>) -> Result<Self, SeqTrainError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(SeqTrainError::ShapeError("log-likelihood matrix must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SeqTrainError::NumericalOverflow("log-likelihood matrix has non-finite entries".into()));
        }
        let values = if values.is_standard_layout() { values } else { values.as_standard_layout().into_owned() };
        Ok(Self { utt_id: utt_id.into(), values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_senones(&self) -> usize {
        self.values.ncols()
    }

    /// Text form: `T S` header, then row-major values with 17 significant digits.
    pub fn write<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write_matrix(out, &self.values)
    }

    pub fn read<R: BufRead>(utt_id: &str, input: &mut R) -> Result<Self, SeqTrainError> {
        let m = read_matrix(input)?.ok_or_else(|| FormatError::Malformed("empty matrix file".into()))?;
        Self::new(utt_id, m)
    }
}

/// Forced alignment used as the numerator: one senone per frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumeratorSupervision {
    pub frames: Vec<SenoneId>,
}

/// `T × S` state-occupancy posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(pub Array2<f64>);

impl PosteriorMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub den_logprob: f64,
    pub posteriors: PosteriorMatrix,
}

#[derive(Debug, Clone)]
pub struct MmiResult {
    /// `num_logprob - den_logprob + ce_weight * ce_logprob`
    pub objective: f64,
    /// Derivative of `objective` with respect to each log-likelihood entry.
    pub gradient: Array2<f64>,
    pub num_logprob: f64,
    pub den_logprob: f64,
    /// Frame-level log-probability of the numerator alignment under a
    /// per-frame softmax of the log-likelihoods; zero when CE is disabled.
    pub ce_logprob: f64,
}

impl MmiResult {
    pub fn mmi(&self) -> f64 {
        self.num_logprob - self.den_logprob
    }
}

// ---------------------------------------------------------------------------
// Sparse transition matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Entry {
    other: usize,
    senone: usize,
    logw: f64,
}

/// Graph transitions in two CSR layouts: grouped by destination (rows of
/// the alpha product) and by source (rows of the beta product).
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    num_states: usize,
    start: usize,
    finals: Vec<f64>,
    in_ptr: Vec<usize>,
    incoming: Vec<Entry>,
    out_ptr: Vec<usize>,
    outgoing: Vec<Entry>,
    max_senone: usize,
}

impl TransitionMatrix {
    pub fn from_graph(graph: &DenominatorGraph) -> Self {
        let n = graph.num_states();
        let mut by_dst: Vec<Vec<Entry>> = vec![Vec::new(); n];
        let mut by_src: Vec<Vec<Entry>> = vec![Vec::new(); n];
        let mut max_senone = 0;
        for (src, dst, s, lp) in graph.transitions() {
            max_senone = max_senone.max(s.index());
            by_dst[dst].push(Entry { other: src, senone: s.index(), logw: lp });
            by_src[src].push(Entry { other: dst, senone: s.index(), logw: lp });
        }
        let flatten = |rows: Vec<Vec<Entry>>| {
            let mut ptr = vec![0];
            let mut flat = Vec::new();
            for r in rows {
                flat.extend(r);
                ptr.push(flat.len());
            }
            (ptr, flat)
        };
        let (in_ptr, incoming) = flatten(by_dst);
        let (out_ptr, outgoing) = flatten(by_src);
        Self {
            num_states: n,
            start: graph.start(),
            finals: graph.final_weights().to_vec(),
            in_ptr,
            incoming,
            out_ptr,
            outgoing,
            max_senone,
        }
    }

    fn check_labels(&self, columns: usize) -> Result<(), SeqTrainError> {
        if self.incoming.is_empty() || self.max_senone < columns {
            Ok(())
        } else {
            Err(SeqTrainError::LabelMismatch { senone: SenoneId(self.max_senone as u32), columns })
        }
    }

    /// `alpha_next[j] = logsum_i alpha[i] + w(i→j) + ll[label(i→j)]`,
    /// optionally restricted to arcs labelled `only`.
    fn forward_step(&self, alpha: &[f64], ll: &[f64], only: Option<usize>, next: &mut [f64]) {
        for j in 0..self.num_states {
            let mut acc = f64::NEG_INFINITY;
            for e in &self.incoming[self.in_ptr[j]..self.in_ptr[j + 1]] {
                if only.is_some_and(|s| s != e.senone) {
                    continue;
                }
                let a = alpha[e.other];
                if a > f64::NEG_INFINITY {
                    acc = log_add(acc, a + e.logw + ll[e.senone]);
                }
            }
            next[j] = acc;
        }
    }

    /// `beta[i] = logsum_j w(i→j) + ll[label(i→j)] + beta_next[j]`.
    fn backward_step(&self, beta_next: &[f64], ll: &[f64], beta: &mut [f64]) {
        for i in 0..self.num_states {
            let mut acc = f64::NEG_INFINITY;
            for e in &self.outgoing[self.out_ptr[i]..self.out_ptr[i + 1]] {
                let b = beta_next[e.other];
                if b > f64::NEG_INFINITY {
                    acc = log_add(acc, e.logw + ll[e.senone] + b);
                }
            }
            beta[i] = acc;
        }
    }

    fn initial_alpha(&self) -> Vec<f64> {
        let mut a = vec![f64::NEG_INFINITY; self.num_states];
        a[self.start] = 0.0;
        a
    }
}

// ---------------------------------------------------------------------------
// Recursions
// ---------------------------------------------------------------------------

/// Denominator log-probability and per-frame senone posteriors.
pub fn forward_backward(graph: &DenominatorGraph, loglikes: &LogLikeMatrix) -> Result<ForwardBackward, SeqTrainError> {
    forward_backward_with(&TransitionMatrix::from_graph(graph), loglikes)
}

/// As [`forward_backward`] with a prebuilt transition matrix, for reuse
/// across many utterances.
pub fn forward_backward_with(tm: &TransitionMatrix, loglikes: &LogLikeMatrix) -> Result<ForwardBackward, SeqTrainError> {
    let ll = loglikes.values();
    let (t_len, s_len) = ll.dim();
    tm.check_labels(s_len)?;
    let n = tm.num_states;

    let mut alpha = vec![vec![f64::NEG_INFINITY; n]; t_len + 1];
    alpha[0] = tm.initial_alpha();
    for t in 0..t_len {
        let row = ll.row(t);
        let row = row.as_slice().expect("standard layout");
        let (prev, rest) = alpha.split_at_mut(t + 1);
        tm.forward_step(&prev[t], row, None, &mut rest[0]);
    }
    let den = log_sum_exp(alpha[t_len].iter().zip(&tm.finals).map(|(a, f)| a + f));
    if !den.is_finite() {
        return Err(SeqTrainError::NumericalOverflow(format!("denominator log-probability is {}", den)));
    }

    let mut beta = vec![vec![f64::NEG_INFINITY; n]; t_len + 1];
    beta[t_len] = tm.finals.clone();
    for t in (0..t_len).rev() {
        let row = ll.row(t);
        let row = row.as_slice().expect("standard layout");
        let (head, tail) = beta.split_at_mut(t + 1);
        tm.backward_step(&tail[0], row, &mut head[t]);
    }

    let mut post = Array2::<f64>::zeros((t_len, s_len));
    for t in 0..t_len {
        for j in 0..n {
            let b = beta[t + 1][j];
            if b == f64::NEG_INFINITY {
                continue;
            }
            for e in &tm.incoming[tm.in_ptr[j]..tm.in_ptr[j + 1]] {
                let a = alpha[t][e.other];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                let occ = (a + e.logw + ll[[t, e.senone]] + b - den).exp();
                post[[t, e.senone]] += occ;
            }
        }
    }
    if post.iter().any(|v| !v.is_finite()) {
        return Err(SeqTrainError::NumericalOverflow("non-finite posterior".into()));
    }
    Ok(ForwardBackward { den_logprob: den, posteriors: PosteriorMatrix(post) })
}

/// Log-probability of the numerator: the acoustic scores along the forced
/// alignment plus the graph weight of all paths carrying that label sequence.
pub fn numerator_logprob(
    tm: &TransitionMatrix,
    num: &NumeratorSupervision,
    loglikes: &LogLikeMatrix,
) -> Result<f64, SeqTrainError> {
    let ll = loglikes.values();
    if num.frames.len() != ll.nrows() {
        return Err(SeqTrainError::ShapeError(format!(
            "numerator has {} frames, log-likelihoods {}",
            num.frames.len(),
            ll.nrows()
        )));
    }
    if let Some(s) = num.frames.iter().find(|s| s.index() >= ll.ncols()) {
        return Err(SeqTrainError::LabelMismatch { senone: *s, columns: ll.ncols() });
    }
    tm.check_labels(ll.ncols())?;
    let mut alpha = tm.initial_alpha();
    let mut next = vec![f64::NEG_INFINITY; tm.num_states];
    for (t, s) in num.frames.iter().enumerate() {
        let row = ll.row(t);
        tm.forward_step(&alpha, row.as_slice().expect("standard layout"), Some(s.index()), &mut next);
        std::mem::swap(&mut alpha, &mut next);
    }
    let total = log_sum_exp(alpha.iter().zip(&tm.finals).map(|(a, f)| a + f));
    if total == f64::NEG_INFINITY {
        return Err(SeqTrainError::NumeratorNotAccepted);
    }
    Ok(total)
}

/// `indicator(num[t] == s) - posterior[t][s]`.
pub fn mmi_gradient(num: &NumeratorSupervision, posteriors: &PosteriorMatrix) -> Result<Array2<f64>, SeqTrainError> {
    let p = posteriors.values();
    if num.frames.len() != p.nrows() {
        return Err(SeqTrainError::ShapeError(format!(
            "numerator has {} frames, posteriors {}",
            num.frames.len(),
            p.nrows()
        )));
    }
    let mut g = -p.clone();
    for (t, s) in num.frames.iter().enumerate() {
        if s.index() >= p.ncols() {
            return Err(SeqTrainError::ShapeError(format!("senone {} outside {} columns", s, p.ncols())));
        }
        g[[t, s.index()]] += 1.0;
    }
    Ok(g)
}

/// Frame cross-entropy term: `sum_t log softmax(ll_t)[num_t]` and its gradient.
pub fn frame_ce(num: &NumeratorSupervision, loglikes: &LogLikeMatrix) -> Result<(f64, Array2<f64>), SeqTrainError> {
    let ll = loglikes.values();
    if num.frames.len() != ll.nrows() {
        return Err(SeqTrainError::ShapeError("numerator / log-likelihood frame mismatch".into()));
    }
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros(ll.dim());
    for (t, (row, mut g)) in ll.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).enumerate() {
        let s = num.frames[t].index();
        if s >= row.len() {
            return Err(SeqTrainError::LabelMismatch { senone: num.frames[t], columns: row.len() });
        }
        let p = softmax(row);
        total += p[s].ln();
        for (gi, pi) in g.iter_mut().zip(&p) {
            *gi = -pi;
        }
        g[s] += 1.0;
    }
    Ok((total, grad))
}

/// LFMMI objective with optional frame cross-entropy regularisation.
///
/// With `ce_weight == 0` the CE term is not evaluated at all, so the result
/// is exactly the pure MMI result.
pub fn mmi_objective_with_ce(
    graph: &DenominatorGraph,
    loglikes: &LogLikeMatrix,
    num: &NumeratorSupervision,
    ce_weight: f64,
) -> Result<MmiResult, SeqTrainError> {
    mmi_objective_with(&TransitionMatrix::from_graph(graph), loglikes, num, ce_weight)
}

pub fn mmi_objective_with(
    tm: &TransitionMatrix,
    loglikes: &LogLikeMatrix,
    num: &NumeratorSupervision,
    ce_weight: f64,
) -> Result<MmiResult, SeqTrainError> {
    if !(ce_weight >= 0.0) || !ce_weight.is_finite() {
        return Err(SeqTrainError::InvalidConfig(format!("ce_weight must be >= 0, got {}", ce_weight)));
    }
    let fb = forward_backward_with(tm, loglikes)?;
    let num_logprob = numerator_logprob(tm, num, loglikes)?;
    let mut gradient = mmi_gradient(num, &fb.posteriors)?;
    let mut objective = num_logprob - fb.den_logprob;
    let mut ce_logprob = 0.0;
    if ce_weight > 0.0 {
        let (ce, ce_grad) = frame_ce(num, loglikes)?;
        ce_logprob = ce;
        objective += ce_weight * ce;
        gradient.scaled_add(ce_weight, &ce_grad);
    }
    Ok(MmiResult { objective, gradient, num_logprob, den_logprob: fb.den_logprob, ce_logprob })
}
