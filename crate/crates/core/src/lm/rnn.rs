//! Toy recurrent language model.
//!
//! Input tokens are embedded either from one-hot ids or from letter-trigram
//! count vectors (`e_w = F_w E`). One or more recurrent layers follow, each
//! either a plain tanh recurrence or a gated cell
//!
//! ```text
//! c~ = tanh(W u + U y' + b)      f = sigmoid(Wf u + Uf y' + bf)
//! c  = f * c' + (1 - f) * c~
//! ```
//!
//! whose output `y = s(beta) c` is scaled by the self-stabilizer
//! `s(beta) = ln(1 + exp(4 beta)) / 4` when stabilization is on. An optional
//! non-recurrent ReLU layer sits on top. The output layer is a full softmax
//! over the vocabulary (minus `<s>`); with tied embeddings the output word
//! vectors are the input word embeddings `F E`.

use std::fmt;
use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::trigram::LetterTrigramEncoder;
use super::{perplexity, Direction, LanguageModelScorer, LmError, Vocab, WordId, BOS_ID, EOS_ID};
use crate::error::FormatError;
use crate::numeric::{log_softmax_in_place, sigmoid, softplus};

/// `0.25 * ln(1 + exp(4 beta))`, overflow safe.
pub fn stabilizer_scale(beta: f64) -> f64 {
    0.25 * softplus(4.0 * beta)
}

/// Derivative of [`stabilizer_scale`].
fn stabilizer_slope(beta: f64) -> f64 {
    sigmoid(4.0 * beta)
}

/// Stabilizer parameter giving a scale of exactly one.
fn unit_beta() -> f64 {
    (4f64.exp() - 1.0).ln() / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Tanh,
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    OneHot,
    LetterTrigram,
}

impl fmt::Display for InputEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputEncoding::OneHot => "word",
            InputEncoding::LetterTrigram => "letter trigram",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub direction: Direction,
    pub encoding: InputEncoding,
    pub embed_dim: usize,
    /// Widths of the stacked recurrent layers.
    pub hidden: Vec<usize>,
    pub cell: CellType,
    /// Width of the optional non-recurrent ReLU layer.
    pub extra_layer: Option<usize>,
    pub tied: bool,
    pub stabilize: bool,
    pub seed: u64,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            direction: Direction::Forward,
            encoding: InputEncoding::OneHot,
            embed_dim: 24,
            hidden: vec![24],
            cell: CellType::Gated,
            extra_layer: Some(24),
            tied: true,
            stabilize: true,
            seed: 1,
        }
    }
}

impl RnnConfig {
    fn top_dim(&self) -> usize {
        self.extra_layer.unwrap_or(*self.hidden.last().unwrap_or(&0))
    }

    fn validate(&self) -> Result<(), LmError> {
        if self.embed_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) || self.extra_layer == Some(0) {
            return Err(LmError::InvalidConfig("layer widths must be positive".into()));
        }
        if self.tied && self.top_dim() != self.embed_dim {
            return Err(LmError::InvalidConfig(format!(
                "tied embeddings need the top layer width ({}) to equal the embedding width ({})",
                self.top_dim(),
                self.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentLayer {
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
    pub gate: Option<GateParams>,
    /// Single stabilizer parameter (length-1 array).
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    /// Input feature embedding, `D x e`.
    pub embed: Array2<f64>,
    pub layers: Vec<RecurrentLayer>,
    pub extra: Option<(Array2<f64>, Array1<f64>)>,
    /// Untied output matrix, `V x top`.
    pub out_w: Option<Array2<f64>>,
    pub out_b: Array1<f64>,
}

impl RnnParams {
    fn zeros_like(o: &Self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.len());
        Self {
            embed: z2(&o.embed),
            layers: o
                .layers
                .iter()
                .map(|l| RecurrentLayer {
                    w: z2(&l.w),
                    u: z2(&l.u),
                    b: z1(&l.b),
                    gate: l.gate.as_ref().map(|g| GateParams { w: z2(&g.w), u: z2(&g.u), b: z1(&g.b) }),
                    beta: z1(&l.beta),
                })
                .collect(),
            extra: o.extra.as_ref().map(|(w, b)| (z2(w), z1(b))),
            out_w: o.out_w.as_ref().map(z2),
            out_b: z1(&o.out_b),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        fn s2(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn s1(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        let mut v = vec![s2(&self.embed)];
        for l in &self.layers {
            v.extend([s2(&l.w), s2(&l.u), s1(&l.b)]);
            if let Some(g) = &l.gate {
                v.extend([s2(&g.w), s2(&g.u), s1(&g.b)]);
            }
            v.push(s1(&l.beta));
        }
        if let Some((w, b)) = &self.extra {
            v.extend([s2(w), s1(b)]);
        }
        if let Some(w) = &self.out_w {
            v.push(s2(w));
        }
        v.push(s1(&self.out_b));
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        fn s2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn s1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut v = vec![s2(&mut self.embed)];
        for l in &mut self.layers {
            v.push(s2(&mut l.w));
            v.push(s2(&mut l.u));
            v.push(s1(&mut l.b));
            if let Some(g) = &mut l.gate {
                v.push(s2(&mut g.w));
                v.push(s2(&mut g.u));
                v.push(s1(&mut g.b));
            }
            v.push(s1(&mut l.beta));
        }
        if let Some((w, b)) = &mut self.extra {
            v.push(s2(w));
            v.push(s1(b));
        }
        if let Some(w) = &mut self.out_w {
            v.push(s2(w));
        }
        v.push(s1(&mut self.out_b));
        v
    }

    fn norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
struct LayerStep {
    u: Array1<f64>,
    ctil: Array1<f64>,
    f: Option<Array1<f64>>,
    c: Array1<f64>,
    y: Array1<f64>,
}

#[derive(Debug, Clone)]
struct Step {
    layers: Vec<LayerStep>,
    extra_pre: Option<Array1<f64>>,
    top: Array1<f64>,
    logp: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyRecurrentLM {
    pub config: RnnConfig,
    vocab: Vocab,
    encoder: Option<LetterTrigramEncoder>,
    pub params: RnnParams,
    #[serde(skip)]
    features: Vec<Vec<(usize, f64)>>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: ArrayView1<f64>) {
    general_mat_mul(1.0, &a.view().insert_axis(Axis(1)), &b.insert_axis(Axis(0)), 1.0, m);
}

impl ToyRecurrentLM {
    pub fn new(config: RnnConfig, vocab: &Vocab) -> Result<Self, LmError> {
        config.validate()?;
        let encoder = match config.encoding {
            InputEncoding::OneHot => None,
            InputEncoding::LetterTrigram => Some(LetterTrigramEncoder::new(vocab.words())),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let v = vocab.len();
        let d = encoder.as_ref().map_or(v, LetterTrigramEncoder::dim);
        let e = config.embed_dim;
        let embed = gaussian(&mut rng, d, e, 0.1);
        let mut layers = Vec::new();
        let mut in_dim = e;
        for &h in &config.hidden {
            let s_in = 1.0 / (in_dim as f64).sqrt();
            let s_h = 0.5 / (h as f64).sqrt();
            let w = gaussian(&mut rng, h, in_dim, s_in);
            let u = gaussian(&mut rng, h, h, s_h);
            let gate = (config.cell == CellType::Gated).then(|| GateParams {
                w: gaussian(&mut rng, h, in_dim, s_in),
                u: gaussian(&mut rng, h, h, s_h),
                b: Array1::zeros(h),
            });
            layers.push(RecurrentLayer { w, u, b: Array1::zeros(h), gate, beta: Array1::from_elem(1, unit_beta()) });
            in_dim = h;
        }
        let extra = config
            .extra_layer
            .map(|x| (gaussian(&mut rng, x, in_dim, 1.0 / (in_dim as f64).sqrt()), Array1::from_elem(x, 0.01)));
        let top = config.top_dim();
        let out_w = (!config.tied).then(|| gaussian(&mut rng, v, top, 1.0 / (top as f64).sqrt()));
        let params = RnnParams { embed, layers, extra, out_w, out_b: Array1::zeros(v) };
        let mut m = Self { config, vocab: vocab.clone(), encoder, params, features: Vec::new() };
        m.build_features();
        Ok(m)
    }

    fn build_features(&mut self) {
        self.features = (0..self.vocab.len())
            .map(|i| match &self.encoder {
                None => vec![(i, 1.0)],
                Some(enc) => enc.encode(self.vocab.word(i as WordId)),
            })
            .collect();
    }

    fn embed(&self, w: WordId) -> Array1<f64> {
        let mut x = Array1::zeros(self.config.embed_dim);
        for &(i, c) in &self.features[w as usize] {
            x.scaled_add(c, &self.params.embed.row(i));
        }
        x
    }

    fn output_matrix(&self) -> Array2<f64> {
        match &self.params.out_w {
            Some(w) => w.clone(),
            None => {
                let mut o = Array2::zeros((self.vocab.len(), self.config.embed_dim));
                for v in 0..self.vocab.len() {
                    o.row_mut(v).assign(&self.embed(v as WordId));
                }
                o
            }
        }
    }

    fn scale(&self, l: usize) -> f64 {
        if self.config.stabilize {
            stabilizer_scale(self.params.layers[l].beta[0])
        } else {
            1.0
        }
    }

    /// Runs over `inputs` (starting with `<s>`); step `t` holds the
    /// distribution of the token after `inputs[t]`.
    fn run(&self, inputs: &[WordId], out: &Array2<f64>) -> Vec<Step> {
        let mut steps: Vec<Step> = Vec::with_capacity(inputs.len());
        for (t, &w) in inputs.iter().enumerate() {
            let mut u = self.embed(w);
            let mut layers = Vec::with_capacity(self.params.layers.len());
            for (l, p) in self.params.layers.iter().enumerate() {
                let h = p.b.len();
                let (y_prev, c_prev) = match t {
                    0 => (Array1::zeros(h), Array1::zeros(h)),
                    _ => (steps[t - 1].layers[l].y.clone(), steps[t - 1].layers[l].c.clone()),
                };
                let ctil = (p.w.dot(&u) + p.u.dot(&y_prev) + &p.b).mapv(f64::tanh);
                let (f, c) = match &p.gate {
                    Some(g) => {
                        let f = (g.w.dot(&u) + g.u.dot(&y_prev) + &g.b).mapv(sigmoid);
                        let c = &f * &c_prev + &(1.0 - &f) * &ctil;
                        (Some(f), c)
                    }
                    None => (None, ctil.clone()),
                };
                let y = &c * self.scale(l);
                layers.push(LayerStep { u, ctil, f, c, y: y.clone() });
                u = y;
            }
            let (extra_pre, top) = match &self.params.extra {
                Some((w, b)) => {
                    let pre = w.dot(&u) + b;
                    let top = pre.mapv(|z| z.max(0.0));
                    (Some(pre), top)
                }
                None => (None, u),
            };
            let mut logp = out.dot(&top) + &self.params.out_b;
            logp[BOS_ID as usize] = f64::NEG_INFINITY;
            log_softmax_in_place(logp.view_mut());
            steps.push(Step { layers, extra_pre, top, logp });
        }
        steps
    }

    fn inputs_targets(seq: &[WordId]) -> (Vec<WordId>, Vec<WordId>) {
        let mut inputs = vec![BOS_ID];
        inputs.extend_from_slice(seq);
        let mut targets = seq.to_vec();
        targets.push(EOS_ID);
        (inputs, targets)
    }

    /// Negative log-likelihood of a processing-order sequence (end token
    /// included) and its gradient.
    pub fn loss_and_grad(&self, seq: &[WordId]) -> (f64, RnnParams) {
        let (inputs, targets) = Self::inputs_targets(seq);
        let out = self.output_matrix();
        let steps = self.run(&inputs, &out);
        let p = &self.params;
        let mut g = RnnParams::zeros_like(p);
        let nll: f64 = steps.iter().zip(&targets).map(|(s, &y)| -s.logp[y as usize]).sum();

        let mut d_out = Array2::<f64>::zeros(out.dim());
        let mut d_above: Vec<Array1<f64>> = Vec::with_capacity(steps.len());
        for (s, &y) in steps.iter().zip(&targets) {
            let mut dl = s.logp.mapv(f64::exp);
            dl[y as usize] -= 1.0;
            g.out_b += &dl;
            add_outer(&mut d_out, &dl, s.top.view());
            d_above.push(out.t().dot(&dl));
        }
        if let Some(w) = &mut g.out_w {
            *w = d_out.clone();
        } else {
            for (v, feats) in self.features.iter().enumerate() {
                for &(i, c) in feats {
                    g.embed.row_mut(i).scaled_add(c, &d_out.row(v));
                }
            }
        }
        if let (Some((w, _)), Some((gw, gb))) = (&p.extra, &mut g.extra) {
            for (t, s) in steps.iter().enumerate() {
                let pre = s.extra_pre.as_ref().expect("extra layer ran");
                let dpre: Array1<f64> = d_above[t].iter().zip(pre).map(|(&d, &z)| if z > 0.0 { d } else { 0.0 }).collect();
                let below = &s.layers.last().expect("at least one layer").y;
                add_outer(gw, &dpre, below.view());
                *gb += &dpre;
                d_above[t] = w.t().dot(&dpre);
            }
        }
        for l in (0..p.layers.len()).rev() {
            let lp = &p.layers[l];
            let h = lp.b.len();
            let scale = self.scale(l);
            let slope = stabilizer_slope(lp.beta[0]);
            let gl = &mut g.layers[l];
            let mut dy_rec = Array1::<f64>::zeros(h);
            let mut dc_rec = Array1::<f64>::zeros(h);
            let zeros = Array1::<f64>::zeros(h);
            for t in (0..steps.len()).rev() {
                let ls = &steps[t].layers[l];
                let (y_prev, c_prev) = if t > 0 {
                    (&steps[t - 1].layers[l].y, &steps[t - 1].layers[l].c)
                } else {
                    (&zeros, &zeros)
                };
                let dy = &d_above[t] + &dy_rec;
                if self.config.stabilize {
                    gl.beta[0] += dy.dot(&ls.c) * slope;
                }
                let dc = &dy * scale + &dc_rec;
                let (dctil, daf) = match &ls.f {
                    Some(f) => {
                        let dctil = &dc * &(1.0 - f);
                        let df = &dc * &(c_prev - &ls.ctil);
                        dc_rec = &dc * f;
                        (dctil, Some(&df * &(f * &(1.0 - f))))
                    }
                    None => (dc, None),
                };
                let da = &dctil * &ls.ctil.mapv(|c| 1.0 - c * c);
                add_outer(&mut gl.w, &da, ls.u.view());
                add_outer(&mut gl.u, &da, y_prev.view());
                gl.b += &da;
                let mut du = lp.w.t().dot(&da);
                dy_rec = lp.u.t().dot(&da);
                if let Some(daf) = daf {
                    let gp = lp.gate.as_ref().expect("gated layer");
                    let gg = gl.gate.as_mut().expect("gated layer");
                    add_outer(&mut gg.w, &daf, ls.u.view());
                    add_outer(&mut gg.u, &daf, y_prev.view());
                    gg.b += &daf;
                    du += &gp.w.t().dot(&daf);
                    dy_rec += &gp.u.t().dot(&daf);
                }
                d_above[t] = du;
            }
        }
        for (t, &w) in inputs.iter().enumerate() {
            for &(i, c) in &self.features[w as usize] {
                g.embed.row_mut(i).scaled_add(c, &d_above[t]);
            }
        }
        (nll, g)
    }

    pub fn save<W: Write>(&self, out: W) -> Result<(), FormatError> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self, FormatError> {
        let mut m: Self = serde_json::from_reader(input)?;
        m.vocab.reindex();
        m.build_features();
        Ok(m)
    }
}

impl PartialEq for ToyRecurrentLM {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config && self.vocab == o.vocab && self.encoder == o.encoder && self.params == o.params
    }
}

impl LanguageModelScorer for ToyRecurrentLM {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn direction(&self) -> Direction {
        self.config.direction
    }

    fn distribution(&self, context: &[WordId]) -> Vec<f64> {
        let mut inputs = vec![BOS_ID];
        inputs.extend_from_slice(context);
        let steps = self.run(&inputs, &self.output_matrix());
        steps.last().expect("non-empty").logp.to_vec()
    }

    fn sentence_token_logprobs(&self, sentence: &[WordId]) -> Vec<f64> {
        let seq = self.direction().arrange(sentence);
        let (inputs, targets) = Self::inputs_targets(&seq);
        let steps = self.run(&inputs, &self.output_matrix());
        let mut lp: Vec<f64> = steps.iter().zip(&targets).map(|(s, &y)| s.logp[y as usize]).collect();
        let end = lp.pop().expect("end token");
        if self.direction() == Direction::Backward {
            lp.reverse();
        }
        lp.push(end);
        lp
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnTrainConfig {
    pub learning_rate: f64,
    /// Passes over the in-domain plus out-of-domain union at a fixed rate.
    pub phase1_passes: usize,
    pub max_phase2_epochs: usize,
    /// Relative validation improvement below which the rate is halved.
    pub min_improvement: f64,
    /// Training stops after this many halvings.
    pub max_halvings: usize,
    pub clip_norm: f64,
}

impl Default for RnnTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            phase1_passes: 4,
            max_phase2_epochs: 10,
            min_improvement: 0.003,
            max_halvings: 3,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_nll_per_token: f64,
    pub valid_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedRnnLm {
    pub model: ToyRecurrentLM,
    pub phase1_perplexity: f64,
    pub final_perplexity: f64,
    pub history: Vec<EpochRecord>,
}

fn sgd_pass(
    model: &mut ToyRecurrentLM,
    data: &[Vec<WordId>],
    lr: f64,
    clip: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, LmError> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for i in order {
        let seq = &data[i];
        let (l, g) = model.loss_and_grad(seq);
        if !l.is_finite() {
            return Err(LmError::TrainingDiverged(format!("non-finite loss {}", l)));
        }
        let n = (seq.len() + 1) as f64;
        nll += l;
        tokens += seq.len() + 1;
        let norm = g.norm() / n;
        let step = if norm > clip { lr * clip / norm } else { lr } / n;
        for (p, gs) in model.params.slices_mut().into_iter().zip(g.slices()) {
            for (a, b) in p.iter_mut().zip(gs) {
                *a -= step * b;
            }
        }
    }
    if !model.params.slices().iter().all(|s| s.iter().all(|v| v.is_finite())) {
        return Err(LmError::TrainingDiverged("non-finite parameters".into()));
    }
    Ok(nll / tokens.max(1) as f64)
}

/// Two-phase training: `phase1_passes` passes over the union of in-domain
/// and out-of-domain text at a fixed rate, then in-domain epochs with the
/// rate halved whenever validation perplexity stops improving. The model
/// with the best validation perplexity (the phase-1 model included) is
/// returned. Sentences are given in sentence order; a backward model
/// reverses them itself.
pub fn train_recurrent_lm(
    in_domain: &[Vec<String>],
    out_domain: &[Vec<String>],
    valid: &[Vec<String>],
    vocab: &Vocab,
    config: &RnnConfig,
    train: &RnnTrainConfig,
) -> Result<TrainedRnnLm, LmError> {
    if in_domain.is_empty() || valid.is_empty() {
        return Err(LmError::EmptyInput);
    }
    let mut model = ToyRecurrentLM::new(config.clone(), vocab)?;
    let prep = |c: &[Vec<String>]| -> Vec<Vec<WordId>> {
        c.iter().map(|s| config.direction.arrange(&vocab.encode(s))).collect()
    };
    let ind = prep(in_domain);
    let mut union = ind.clone();
    union.extend(prep(out_domain));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut history = Vec::new();
    let ppl = |m: &ToyRecurrentLM| perplexity(m, valid).map(|r| r.perplexity);

    for epoch in 0..train.phase1_passes {
        let nll = sgd_pass(&mut model, &union, train.learning_rate, train.clip_norm, &mut rng)?;
        let p = ppl(&model)?;
        log::debug!("rnn phase 1 pass {}: nll {:.4} valid ppl {:.3}", epoch, nll, p);
        history.push(EpochRecord { phase: 1, epoch, learning_rate: train.learning_rate, train_nll_per_token: nll, valid_perplexity: p });
    }
    let phase1_perplexity = ppl(&model)?;
    let mut best = (model.clone(), phase1_perplexity);
    let mut prev = phase1_perplexity;
    let mut lr = train.learning_rate;
    let mut halvings = 0;
    for epoch in 0..train.max_phase2_epochs {
        let nll = sgd_pass(&mut model, &ind, lr, train.clip_norm, &mut rng)?;
        let p = ppl(&model)?;
        log::debug!("rnn phase 2 epoch {}: nll {:.4} valid ppl {:.3} lr {}", epoch, nll, p, lr);
        history.push(EpochRecord { phase: 2, epoch, learning_rate: lr, train_nll_per_token: nll, valid_perplexity: p });
        if p < best.1 {
            best = (model.clone(), p);
        }
        if p > prev * (1.0 - train.min_improvement) {
            halvings += 1;
            if halvings > train.max_halvings {
                break;
            }
            lr *= 0.5;
        }
        prev = p;
    }
    Ok(TrainedRnnLm { model: best.0, phase1_perplexity, final_perplexity: best.1, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepRow {
    pub label: String,
    pub layers: usize,
    pub perplexity: f64,
}

/// Validation perplexity as a function of recurrent layer count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepReport {
    pub rows: Vec<LayerSweepRow>,
}

const COUNT_WORDS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];

impl fmt::Display for LayerSweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Language model".len());
        writeln!(f, "| {:<w$} | PPL |", "Language model", w = w)?;
        writeln!(f, "|-{}-|-----|", "-".repeat(w))?;
        for r in &self.rows {
            writeln!(f, "| {:<w$} | {:.1} |", r.label, r.perplexity, w = w)?;
        }
        Ok(())
    }
}

/// Trains one model per layer count (same width as the first hidden
/// layer of `base`) and reports validation perplexities.
pub fn layer_sweep(
    in_domain: &[Vec<String>],
    out_domain: &[Vec<String>],
    valid: &[Vec<String>],
    vocab: &Vocab,
    base: &RnnConfig,
    train: &RnnTrainConfig,
    layer_counts: &[usize],
) -> Result<LayerSweepReport, LmError> {
    let width = *base.hidden.first().ok_or_else(|| LmError::InvalidConfig("no hidden layer".into()))?;
    let mut rows = Vec::new();
    for (i, &n) in layer_counts.iter().enumerate() {
        let cfg = RnnConfig { hidden: vec![width; n], ..base.clone() };
        let t = train_recurrent_lm(in_domain, out_domain, valid, vocab, &cfg, train)?;
        let count = COUNT_WORDS.get(n).map_or_else(|| n.to_string(), |s| s.to_string());
        let plural = if n == 1 { "layer" } else { "layers" };
        let label = if i == 0 {
            format!("{} input with {} {} (baseline)", base.encoding, count, plural)
        } else {
            format!("  + {} hidden {}", count, plural)
        };
        rows.push(LayerSweepRow { label, layers: n, perplexity: t.final_perplexity });
    }
    Ok(LayerSweepReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(["cat", "act", "dog", "sat"].map(String::from))
    }

    #[test]
    fn stabilizer_values() {
        assert!((stabilizer_scale(0.0) - 2f64.ln() / 4.0).abs() < 1e-9);
        assert!((stabilizer_scale(10.0) - 10.0).abs() < 1e-7);
        let s = stabilizer_scale(-10.0);
        assert!(s > 0.0);
        assert!((s - 1.0612e-18).abs() < 1e-21, "{}", s);
        assert!((stabilizer_scale(unit_beta()) - 1.0).abs() < 1e-12);
        assert!(stabilizer_scale(1000.0).is_finite());
    }

    #[test]
    fn stabilizer_monotone_and_convex() {
        let grid: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.05).collect();
        let v: Vec<f64> = grid.iter().map(|&b| stabilizer_scale(b)).collect();
        assert!(v.iter().all(|&x| x > 0.0));
        assert!(v.windows(2).all(|w| w[1] > w[0]));
        assert!(v.windows(3).all(|w| w[0] + w[2] - 2.0 * w[1] >= -1e-12));
    }

    fn configs() -> Vec<RnnConfig> {
        vec![
            RnnConfig { embed_dim: 4, hidden: vec![5, 4], extra_layer: None, cell: CellType::Gated, tied: true, ..Default::default() },
            RnnConfig { embed_dim: 3, hidden: vec![4], extra_layer: Some(3), cell: CellType::Tanh, tied: true, ..Default::default() },
            RnnConfig {
                embed_dim: 3,
                hidden: vec![4],
                extra_layer: Some(5),
                cell: CellType::Gated,
                tied: false,
                encoding: InputEncoding::LetterTrigram,
                direction: Direction::Backward,
                ..Default::default()
            },
            RnnConfig { embed_dim: 3, hidden: vec![3], extra_layer: None, stabilize: false, tied: false, ..Default::default() },
        ]
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = vocab();
        let seq = v.encode(&["cat", "sat", "dog"]);
        for cfg in configs() {
            let mut m = ToyRecurrentLM::new(cfg.clone(), &v).unwrap();
            // move away from the symmetric stabilizer start
            for l in &mut m.params.layers {
                l.beta[0] = 0.3;
            }
            let (_, g) = m.loss_and_grad(&seq);
            let analytic: Vec<f64> = g.slices().concat();
            let eps = 1e-4;
            let mut fd = Vec::new();
            let n = m.params.slices().len();
            for si in 0..n {
                for k in 0..m.params.slices()[si].len() {
                    let mut a = m.clone();
                    a.params.slices_mut()[si][k] += eps;
                    let mut b = m.clone();
                    b.params.slices_mut()[si][k] -= eps;
                    fd.push((a.loss_and_grad(&seq).0 - b.loss_and_grad(&seq).0) / (2.0 * eps));
                }
            }
            let d: f64 = analytic.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nf = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rel = d / na.max(nf);
            assert!(rel <= 1e-4, "{:?}: rel err {}", cfg, rel);
        }
    }

    #[test]
    fn distributions_normalised() {
        let v = vocab();
        for cfg in configs() {
            let m = ToyRecurrentLM::new(cfg, &v).unwrap();
            for ctx in [vec![], v.encode(&["cat"]), v.encode(&["dog", "zzz", "sat"])] {
                let d = m.distribution(&ctx);
                assert_eq!(d[BOS_ID as usize], f64::NEG_INFINITY);
                let s: f64 = d.iter().map(|l| l.exp()).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn token_logprobs_agree_with_distribution() {
        let v = vocab();
        for cfg in configs() {
            let m = ToyRecurrentLM::new(cfg, &v).unwrap();
            let s = v.encode(&["cat", "sat", "dog"]);
            let fast = m.sentence_token_logprobs(&s);
            let seq = m.direction().arrange(&s);
            let mut slow: Vec<f64> = (0..3).map(|i| m.log_prob(&seq[..i], seq[i])).collect();
            if m.direction() == Direction::Backward {
                slow.reverse();
            }
            slow.push(m.log_prob(&seq, EOS_ID));
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tied_requires_matching_widths() {
        let cfg = RnnConfig { embed_dim: 4, hidden: vec![5], extra_layer: None, tied: true, ..Default::default() };
        assert!(matches!(ToyRecurrentLM::new(cfg, &vocab()), Err(LmError::InvalidConfig(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let v = vocab();
        let m = ToyRecurrentLM::new(configs()[2].clone(), &v).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = ToyRecurrentLM::load(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let s = v.encode(&["act", "cat"]);
        assert_eq!(back.sentence_token_logprobs(&s), m.sentence_token_logprobs(&s));
    }
}
