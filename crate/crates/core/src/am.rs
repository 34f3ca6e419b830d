//! Toy acoustic model: a small feed-forward network (optionally with a
//! simple recurrence in the first hidden layer) producing per-frame senone
//! log-likelihoods, trained with frame cross-entropy or LFMMI.
//!
//! Two extras ride on top of the plain network:
//!
//! * spatial smoothing, a penalty on the high-pass energy of each hidden
//!   activation vector viewed as a 2-D image;
//! * speaker conditioning, either by appending the speaker vector to every
//!   input frame or by adding `W^l v` to each hidden layer before its
//!   nonlinearity.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;
use crate::graph::{DenominatorGraph, SenoneId};
use crate::numeric::{log_softmax_in_place, sigmoid};
use crate::seqtrain::{mmi_objective_with, LogLikeMatrix, NumeratorSupervision, SeqTrainError, TransitionMatrix};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Default scale of the smoothing energy relative to the base objective.
pub const DEFAULT_SMOOTHING_WEIGHT: f64 = 0.1;

/// Default speaker-vector dimension.
pub const DEFAULT_SPEAKER_DIM: usize = 100;

#[derive(Debug, Error)]
pub enum AmError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("empty training data")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    SeqTrain(#[from] SeqTrainError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

// ---------------------------------------------------------------------------
// Spatial smoothing
// ---------------------------------------------------------------------------

/// 3×3 high-pass kernel: centre tap 1, the eight neighbours −1/8.
pub const HIGH_PASS_KERNEL: [[f64; 3]; 3] = [
    [-0.125, -0.125, -0.125],
    [-0.125, 1.0, -0.125],
    [-0.125, -0.125, -0.125],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialFilter {
    pub rows: usize,
    pub cols: usize,
    pub weight: f64,
}

impl SpatialFilter {
    pub fn new(rows: usize, cols: usize, weight: f64) -> Self {
        Self { rows, cols, weight }
    }

    /// Most-square factorisation `rows × cols = width` with `cols >= rows`.
    pub fn for_width(width: usize, weight: f64) -> Self {
        let mut rows = (width as f64).sqrt() as usize;
        while rows > 1 && width % rows != 0 {
            rows -= 1;
        }
        let rows = rows.max(1);
        Self { rows, cols: width / rows, weight }
    }

    pub fn kernel(&self) -> [[f64; 3]; 3] {
        HIGH_PASS_KERNEL
    }

    pub fn width(&self) -> usize {
        self.rows * self.cols
    }

    /// Indices of the eight circular neighbours of pixel `(r, c)`.
    fn neighbours(&self, r: usize, c: usize) -> impl Iterator<Item = usize> + '_ {
        let (r_n, c_n) = (self.rows, self.cols);
        (0..3)
            .flat_map(|dr| (0..3).map(move |dc| (dr, dc)))
            .filter(|&d| d != (1, 1))
            .map(move |(dr, dc)| ((r + r_n + dr - 1) % r_n) * c_n + (c + c_n + dc - 1) % c_n)
    }

    /// Circular 3×3 convolution of the row-major image `x`. Evaluated as
    /// `sum_n (x_c - x_n) / 8`, which equals the kernel response and is
    /// exactly zero on constant images.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.width()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                y[i] = self.neighbours(r, c).map(|n| 0.125 * (x[i] - x[n])).sum();
            }
        }
        y
    }

    /// Adjoint of [`filter`](Self::filter).
    fn filter_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.width()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                let v = 0.125 * y[i];
                for n in self.neighbours(r, c) {
                    x[i] += v;
                    x[n] -= v;
                }
            }
        }
        x
    }
}

/// Smoothing energy `weight * sum(filtered^2)` and its exact gradient.
pub fn spatial_penalty(activations: &[f64], filter: &SpatialFilter) -> Result<(f64, Vec<f64>), AmError> {
    if activations.len() != filter.width() {
        return Err(AmError::ShapeError(format!(
            "{} activations cannot be viewed as a {}x{} image",
            activations.len(),
            filter.rows,
            filter.cols
        )));
    }
    let y = filter.filter(activations);
    let value = filter.weight * y.iter().map(|v| v * v).sum::<f64>();
    let mut grad = filter.filter_adjoint(&y);
    for g in &mut grad {
        *g *= 2.0 * filter.weight;
    }
    Ok((value, grad))
}

/// Which hidden layers carry the smoothing penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub weight: f64,
    /// Hidden-layer indices; `None` means every hidden layer.
    pub layers: Option<Vec<usize>>,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self { weight: DEFAULT_SMOOTHING_WEIGHT, layers: None }
    }
}

impl Smoothing {
    fn applies_to(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerMode {
    None,
    Append,
    LayerBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_senones: usize,
    pub nonlinearity: Nonlinearity,
    pub speaker_dim: usize,
    pub speaker_mode: SpeakerMode,
    /// Adds a simple recurrence to the first hidden layer.
    pub recurrent: bool,
}

impl AmConfig {
    fn validate(&self) -> Result<(), AmError> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(AmError::InvalidConfig("need at least one non-empty hidden layer".into()));
        }
        if self.input_dim == 0 || self.num_senones == 0 {
            return Err(AmError::InvalidConfig("input and output widths must be positive".into()));
        }
        if self.speaker_mode != SpeakerMode::None && self.speaker_dim == 0 {
            return Err(AmError::InvalidConfig("speaker conditioning needs speaker_dim > 0".into()));
        }
        Ok(())
    }

    fn network_input_dim(&self) -> usize {
        match self.speaker_mode {
            SpeakerMode::Append => self.input_dim + self.speaker_dim,
            _ => self.input_dim,
        }
    }
}

/// Conversation-side speaker characterisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerVector {
    pub side_id: String,
    pub values: Array1<f64>,
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmParams {
    /// `weights[l]` is `out × in`; the last entry is the output layer.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// Per hidden layer `W^l` (`width × speaker_dim`); empty unless layer-bias mode.
    pub speaker: Vec<Array2<f64>>,
    pub recurrent: Option<Array2<f64>>,
}

impl AmParams {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            weights: other.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: other.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            speaker: other.speaker.iter().map(|w| Array2::zeros(w.dim())).collect(),
            recurrent: other.recurrent.as_ref().map(|r| Array2::zeros(r.dim())),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        v.extend(self.weights.iter().map(|w| w.as_slice().expect("standard layout")));
        v.extend(self.biases.iter().map(|b| b.as_slice().expect("standard layout")));
        v.extend(self.speaker.iter().map(|w| w.as_slice().expect("standard layout")));
        if let Some(r) = &self.recurrent {
            v.push(r.as_slice().expect("standard layout"));
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.extend(self.weights.iter_mut().map(|w| w.as_slice_mut().expect("standard layout")));
        v.extend(self.biases.iter_mut().map(|b| b.as_slice_mut().expect("standard layout")));
        v.extend(self.speaker.iter_mut().map(|w| w.as_slice_mut().expect("standard layout")));
        if let Some(r) = &mut self.recurrent {
            v.push(r.as_slice_mut().expect("standard layout"));
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (d, s) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, b) in d.iter_mut().zip(s) {
                *a += alpha * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAcousticModel {
    pub config: AmConfig,
    pub params: AmParams,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: Array2<f64>,
    pub pre: Vec<Array2<f64>>,
    pub hidden: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub loglikes: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AmUtterance {
    pub utt_id: String,
    pub features: Array2<f64>,
    /// Frame-level senone targets (forced alignment).
    pub targets: Vec<SenoneId>,
    pub speaker: Option<SpeakerVector>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

impl ToyAcousticModel {
    pub fn new(config: AmConfig, seed: u64) -> Result<Self, AmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![config.network_input_dim()];
        dims.extend(&config.hidden);
        dims.push(config.num_senones);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            weights.push(gaussian_matrix(&mut rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt()));
            biases.push(Array1::zeros(w[1]));
        }
        let speaker = if config.speaker_mode == SpeakerMode::LayerBias {
            config
                .hidden
                .iter()
                .map(|&h| gaussian_matrix(&mut rng, h, config.speaker_dim, 0.5 / (config.speaker_dim as f64).sqrt()))
                .collect()
        } else {
            Vec::new()
        };
        let recurrent = config
            .recurrent
            .then(|| gaussian_matrix(&mut rng, config.hidden[0], config.hidden[0], 0.3 / (config.hidden[0] as f64).sqrt()));
        Ok(Self { config, params: AmParams { weights, biases, speaker, recurrent } })
    }

    pub fn num_hidden(&self) -> usize {
        self.config.hidden.len()
    }

    fn act(&self, x: f64) -> f64 {
        match self.config.nonlinearity {
            Nonlinearity::Sigmoid => sigmoid(x),
            Nonlinearity::Relu => x.max(0.0),
        }
    }

    fn act_deriv(&self, pre: f64, out: f64) -> f64 {
        match self.config.nonlinearity {
            Nonlinearity::Sigmoid => out * (1.0 - out),
            Nonlinearity::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn speaker_values<'a>(&self, speaker: Option<&'a SpeakerVector>) -> Result<Option<&'a Array1<f64>>, AmError> {
        match (self.config.speaker_mode, speaker) {
            (SpeakerMode::None, _) | (_, None) => Ok(None),
            (_, Some(v)) if v.values.len() != self.config.speaker_dim => Err(AmError::ShapeError(format!(
                "speaker vector has dimension {}, model expects {}",
                v.values.len(),
                self.config.speaker_dim
            ))),
            (_, Some(v)) => Ok(Some(&v.values)),
        }
    }

    /// Forward pass over one utterance. A missing speaker vector behaves as
    /// the zero vector.
    pub fn forward(&self, features: &Array2<f64>, speaker: Option<&SpeakerVector>) -> Result<ForwardPass, AmError> {
        if features.ncols() != self.config.input_dim {
            return Err(AmError::ShapeError(format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                self.config.input_dim
            )));
        }
        if features.nrows() == 0 {
            return Err(AmError::ShapeError("utterance has no frames".into()));
        }
        let v = self.speaker_values(speaker)?;
        let t_len = features.nrows();
        let input = if self.config.speaker_mode == SpeakerMode::Append {
            let mut x = Array2::zeros((t_len, self.config.network_input_dim()));
            x.slice_mut(ndarray::s![.., ..self.config.input_dim]).assign(features);
            if let Some(v) = v {
                for mut row in x.rows_mut() {
                    row.slice_mut(ndarray::s![self.config.input_dim..]).assign(v);
                }
            }
            x
        } else {
            features.clone()
        };

        let p = &self.params;
        let mut pre = Vec::new();
        let mut hidden: Vec<Array2<f64>> = Vec::new();
        for l in 0..self.num_hidden() {
            let x = if l == 0 { &input } else { &hidden[l - 1] };
            let mut a = x.dot(&p.weights[l].t()) + &p.biases[l];
            if let (Some(v), SpeakerMode::LayerBias) = (v, self.config.speaker_mode) {
                a += &p.speaker[l].dot(v);
            }
            let h = if l == 0 && p.recurrent.is_some() {
                let r = p.recurrent.as_ref().expect("checked");
                let mut h = Array2::zeros(a.dim());
                for t in 0..t_len {
                    if t > 0 {
                        let carry = r.dot(&h.row(t - 1));
                        let mut row = a.row_mut(t);
                        row += &carry;
                    }
                    let out = a.row(t).mapv(|z| self.act(z));
                    h.row_mut(t).assign(&out);
                }
                h
            } else {
                a.mapv(|z| self.act(z))
            };
            pre.push(a);
            hidden.push(h);
        }
        let last = self.params.weights.len() - 1;
        let logits = hidden[last - 1].dot(&p.weights[last].t()) + &p.biases[last];
        let mut loglikes = logits.clone();
        for row in loglikes.rows_mut() {
            log_softmax_in_place(row);
        }
        Ok(ForwardPass { input, pre, hidden, logits, loglikes })
    }

    /// Log-likelihood matrix for an utterance.
    pub fn loglikes(&self, utt_id: &str, features: &Array2<f64>, speaker: Option<&SpeakerVector>) -> Result<LogLikeMatrix, AmError> {
        let fp = self.forward(features, speaker)?;
        Ok(LogLikeMatrix::new(utt_id, fp.loglikes)?)
    }

    /// Backpropagates `d_logits` (plus optional extra gradients on hidden
    /// activations) into a parameter gradient.
    pub fn backward(
        &self,
        fp: &ForwardPass,
        d_logits: &Array2<f64>,
        d_hidden_extra: Option<&[Array2<f64>]>,
        speaker: Option<&SpeakerVector>,
    ) -> Result<AmParams, AmError> {
        let v = self.speaker_values(speaker)?;
        let p = &self.params;
        let mut g = AmParams::zeros_like(p);
        let last = p.weights.len() - 1;
        g.weights[last] = d_logits.t().dot(&fp.hidden[last - 1]);
        g.biases[last] = d_logits.sum_axis(Axis(0));
        let mut d_act = d_logits.dot(&p.weights[last]);
        for l in (0..self.num_hidden()).rev() {
            if let Some(extra) = d_hidden_extra {
                d_act += &extra[l];
            }
            let d_pre = if l == 0 && p.recurrent.is_some() {
                let r = p.recurrent.as_ref().expect("checked");
                let gr = g.recurrent.as_mut().expect("shaped like params");
                let (t_len, width) = d_act.dim();
                let mut d_pre = Array2::zeros((t_len, width));
                let mut carry = Array1::<f64>::zeros(width);
                for t in (0..t_len).rev() {
                    let da = &d_act.row(t) + &carry;
                    let dp: Array1<f64> = da
                        .iter()
                        .zip(fp.pre[0].row(t))
                        .zip(fp.hidden[0].row(t))
                        .map(|((&d, &z), &h)| d * self.act_deriv(z, h))
                        .collect();
                    carry = r.t().dot(&dp);
                    if t > 0 {
                        let prev = fp.hidden[0].row(t - 1);
                        for i in 0..width {
                            for j in 0..width {
                                gr[[i, j]] += dp[i] * prev[j];
                            }
                        }
                    }
                    d_pre.row_mut(t).assign(&dp);
                }
                d_pre
            } else {
                let mut d = d_act.clone();
                ndarray::Zip::from(&mut d)
                    .and(&fp.pre[l])
                    .and(&fp.hidden[l])
                    .for_each(|d, &z, &h| *d *= self.act_deriv(z, h));
                d
            };
            let x = if l == 0 { &fp.input } else { &fp.hidden[l - 1] };
            g.weights[l] = d_pre.t().dot(x);
            g.biases[l] = d_pre.sum_axis(Axis(0));
            if let (Some(v), SpeakerMode::LayerBias) = (v, self.config.speaker_mode) {
                let col = g.biases[l].clone();
                g.speaker[l] = col.insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
            }
            if l > 0 {
                d_act = d_pre.dot(&p.weights[l]);
            }
        }
        for m in g.weights.iter_mut().chain(g.speaker.iter_mut()).chain(g.recurrent.iter_mut()) {
            if !m.is_standard_layout() {
                *m = m.as_standard_layout().into_owned();
            }
        }
        Ok(g)
    }

    /// Copy of the model with speaker conditioning stripped: appended input
    /// columns and per-layer speaker matrices are dropped.
    pub fn without_speaker(&self) -> Self {
        let mut m = self.clone();
        if self.config.speaker_mode == SpeakerMode::Append {
            m.params.weights[0] = self.params.weights[0].slice(ndarray::s![.., ..self.config.input_dim]).to_owned();
        }
        m.params.speaker.clear();
        m.config.speaker_mode = SpeakerMode::None;
        m
    }

    pub fn save<W: Write>(&self, out: W) -> Result<(), AmError> {
        #[derive(Serialize)]
        struct Ck<'a> {
            version: u32,
            model: &'a ToyAcousticModel,
        }
        serde_json::to_writer(out, &Ck { version: CHECKPOINT_VERSION, model: self }).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self, AmError> {
        #[derive(Deserialize)]
        struct Ck {
            version: u32,
            model: ToyAcousticModel,
        }
        let ck: Ck = serde_json::from_reader(input).map_err(FormatError::from)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(AmError::UnsupportedVersion(ck.version));
        }
        ck.model.config.validate()?;
        Ok(ck.model)
    }
}

/// Log-likelihoods of `frames` conditioned on speaker vector `v`, using the
/// conditioning mode the model was configured with.
pub fn condition_on_speaker(
    model: &ToyAcousticModel,
    frames: &Array2<f64>,
    v: &SpeakerVector,
) -> Result<Array2<f64>, AmError> {
    if model.config.speaker_mode == SpeakerMode::None {
        return Err(AmError::InvalidConfig("model has no speaker conditioning".into()));
    }
    Ok(model.forward(frames, Some(v))?.loglikes)
}

// ---------------------------------------------------------------------------
// Objectives and training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    CrossEntropy,
    Lfmmi { graph: &'a DenominatorGraph, ce_weight: f64 },
}

/// Prepared objective: the LFMMI transition matrix is built once.
enum Prepared {
    CrossEntropy,
    Lfmmi { tm: TransitionMatrix, ce_weight: f64 },
}

impl Prepared {
    fn new(obj: &Objective<'_>) -> Self {
        match *obj {
            Objective::CrossEntropy => Prepared::CrossEntropy,
            Objective::Lfmmi { graph, ce_weight } => {
                Prepared::Lfmmi { tm: TransitionMatrix::from_graph(graph), ce_weight }
            }
        }
    }
}

/// Per-frame-normalised loss terms (lower is better).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub base: f64,
    pub penalty: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.base + self.penalty
    }
}

fn utterance_loss(
    model: &ToyAcousticModel,
    utt: &AmUtterance,
    objective: &Prepared,
    smoothing: Option<&Smoothing>,
    want_grad: bool,
) -> Result<(LossParts, Option<AmParams>), AmError> {
    let speaker = utt.speaker.as_ref();
    let fp = model.forward(&utt.features, speaker)?;
    let (t_len, s_len) = fp.loglikes.dim();
    if utt.targets.len() != t_len {
        return Err(AmError::ShapeError(format!("{} targets for {} frames", utt.targets.len(), t_len)));
    }
    let scale = 1.0 / t_len as f64;
    let probs = fp.loglikes.mapv(f64::exp);
    let (base, d_logits) = match objective {
        Prepared::CrossEntropy => {
            let mut loss = 0.0;
            let mut d = probs.clone();
            for (t, s) in utt.targets.iter().enumerate() {
                if s.index() >= s_len {
                    return Err(AmError::ShapeError(format!("target senone {} outside {}", s, s_len)));
                }
                loss -= fp.loglikes[[t, s.index()]];
                d[[t, s.index()]] -= 1.0;
            }
            (loss * scale, d * scale)
        }
        Prepared::Lfmmi { tm, ce_weight } => {
            let ll = LogLikeMatrix::new(&utt.utt_id, fp.loglikes.clone())?;
            let num = NumeratorSupervision { frames: utt.targets.clone() };
            let r = mmi_objective_with(tm, &ll, &num, *ce_weight)?;
            // chain rule through log-softmax: d/dz_j = g_j - p_j * sum_k g_k
            let d_ll = r.gradient.mapv(|g| -g * scale);
            let row_sums = d_ll.sum_axis(Axis(1));
            let mut d = d_ll;
            for ((mut row, p), rs) in d.rows_mut().into_iter().zip(probs.rows()).zip(row_sums.iter()) {
                row.zip_mut_with(&p, |g, &pj| *g -= pj * rs);
            }
            (-r.objective * scale, d)
        }
    };

    let mut penalty = 0.0;
    let mut extra: Vec<Array2<f64>> = fp.hidden.iter().map(|h| Array2::zeros(h.dim())).collect();
    if let Some(sm) = smoothing {
        for (l, h) in fp.hidden.iter().enumerate() {
            if !sm.applies_to(l) {
                continue;
            }
            let filter = SpatialFilter::for_width(h.ncols(), sm.weight);
            for (t, row) in h.rows().into_iter().enumerate() {
                let (v, g) = spatial_penalty(row.as_slice().expect("standard layout"), &filter)?;
                penalty += v * scale;
                for (e, gv) in extra[l].row_mut(t).iter_mut().zip(g) {
                    *e = gv * scale;
                }
            }
        }
    }
    let parts = LossParts { base, penalty };
    if !parts.total().is_finite() {
        return Err(AmError::TrainingDiverged(format!("non-finite loss on {}", utt.utt_id)));
    }
    let grad = if want_grad {
        Some(model.backward(&fp, &d_logits, smoothing.map(|_| extra.as_slice()), speaker)?)
    } else {
        None
    };
    Ok((parts, grad))
}

/// Loss and parameter gradient for one utterance.
pub fn loss_and_grad(
    model: &ToyAcousticModel,
    utt: &AmUtterance,
    objective: &Objective<'_>,
    smoothing: Option<&Smoothing>,
) -> Result<(LossParts, AmParams), AmError> {
    let (parts, g) = utterance_loss(model, utt, &Prepared::new(objective), smoothing, true)?;
    Ok((parts, g.expect("gradient requested")))
}

/// Mean per-utterance loss over a corpus.
pub fn evaluate(
    model: &ToyAcousticModel,
    data: &[AmUtterance],
    objective: &Objective<'_>,
    smoothing: Option<&Smoothing>,
) -> Result<LossParts, AmError> {
    evaluate_prepared(model, data, &Prepared::new(objective), smoothing)
}

fn evaluate_prepared(
    model: &ToyAcousticModel,
    data: &[AmUtterance],
    objective: &Prepared,
    smoothing: Option<&Smoothing>,
) -> Result<LossParts, AmError> {
    if data.is_empty() {
        return Err(AmError::EmptyInput);
    }
    let parts: Vec<LossParts> = data
        .par_iter()
        .map(|u| utterance_loss(model, u, objective, smoothing, false).map(|(p, _)| p))
        .collect::<Result<_, _>>()?;
    let n = parts.len() as f64;
    Ok(LossParts {
        base: parts.iter().map(|p| p.base).sum::<f64>() / n,
        penalty: parts.iter().map(|p| p.penalty).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for AmTrainConfig {
    fn default() -> Self {
        Self { epochs: 5, learning_rate: 0.1, momentum: 0.9, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub initial: LossParts,
    pub epochs: Vec<LossParts>,
}

impl LossTrace {
    pub fn last(&self) -> LossParts {
        self.epochs.last().copied().unwrap_or(self.initial)
    }
}

/// Per-utterance SGD with momentum. The trace holds the full-corpus loss
/// before training and after each epoch.
pub fn train_toy_am(
    mut model: ToyAcousticModel,
    data: &[AmUtterance],
    objective: &Objective<'_>,
    smoothing: Option<&Smoothing>,
    config: &AmTrainConfig,
) -> Result<(ToyAcousticModel, LossTrace), AmError> {
    use rand::seq::SliceRandom;
    if data.is_empty() {
        return Err(AmError::EmptyInput);
    }
    let prepared = Prepared::new(objective);
    let initial = evaluate_prepared(&model, data, &prepared, smoothing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = AmParams::zeros_like(&model.params);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (_, g) = utterance_loss(&model, &data[i], &prepared, smoothing, true)?;
            let g = g.expect("gradient requested");
            for (v, gs) in velocity.slices_mut().into_iter().zip(g.slices()) {
                for (vi, gi) in v.iter_mut().zip(gs) {
                    *vi = config.momentum * *vi - config.learning_rate * gi;
                }
            }
            model.params.axpy(1.0, &velocity);
        }
        if !model.params.is_finite() {
            return Err(AmError::TrainingDiverged(format!("non-finite parameters after epoch {}", epoch)));
        }
        let parts = evaluate_prepared(&model, data, &prepared, smoothing)?;
        log::debug!("am epoch {}: base {:.5} penalty {:.5}", epoch, parts.base, parts.penalty);
        epochs.push(parts);
    }
    Ok((model, LossTrace { initial, epochs }))
}

/// Mean absolute Pearson correlation between each hidden unit of `layer`
/// and its right and lower neighbours in the circular 2-D image layout,
/// measured across all frames of `data`. Pairs with a constant unit are skipped.
pub fn neighbor_correlation(model: &ToyAcousticModel, data: &[AmUtterance], layer: usize) -> Result<f64, AmError> {
    if layer >= model.num_hidden() {
        return Err(AmError::InvalidConfig(format!("no hidden layer {}", layer)));
    }
    let mut frames: Vec<Array1<f64>> = Vec::new();
    for u in data {
        let fp = model.forward(&u.features, u.speaker.as_ref())?;
        frames.extend(fp.hidden[layer].rows().into_iter().map(|r| r.to_owned()));
    }
    if frames.len() < 2 {
        return Err(AmError::EmptyInput);
    }
    let width = model.config.hidden[layer];
    let n = frames.len() as f64;
    let mean: Vec<f64> = (0..width).map(|i| frames.iter().map(|f| f[i]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..width)
        .map(|i| (frames.iter().map(|f| (f[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let filt = SpatialFilter::for_width(width, 0.0);
    let (rows, cols) = (filt.rows, filt.cols);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            for j in [r * cols + (c + 1) % cols, ((r + 1) % rows) * cols + c] {
                if i == j || std[i] < 1e-12 || std[j] < 1e-12 {
                    continue;
                }
                let cov = frames.iter().map(|f| (f[i] - mean[i]) * (f[j] - mean[j])).sum::<f64>() / n;
                total += (cov / (std[i] * std[j])).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}
