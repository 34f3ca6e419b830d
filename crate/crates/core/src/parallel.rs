//! Deterministic simulator of data-parallel SGD with 1-bit gradient
//! quantization, error-feedback residuals and automatic minibatch scaling.
//!
//! Sub-gradients are sums over the local minibatch, so the learning rate is
//! per sample and a larger minibatch takes a proportionally larger step.

use bitvec::prelude::*;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{sigmoid, softplus};

#[derive(Debug, Error)]
pub enum ParallelError {
    #[error("replica of worker {0} diverged from the shared model")]
    SyncError(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerColumn,
    PerTensor,
}

/// Sign bits plus two reconstruction values per column (or per tensor).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGradient {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; set for strictly positive entries.
    pub signs: BitVec<u64, Lsb0>,
    pub pos_scale: Vec<f64>,
    pub neg_scale: Vec<f64>,
    pub granularity: Granularity,
}

impl QuantizedGradient {
    fn group(&self, col: usize) -> usize {
        match self.granularity {
            Granularity::PerColumn => col,
            Granularity::PerTensor => 0,
        }
    }

    pub fn dequantize(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| {
            let g = self.group(c);
            if self.signs[r * self.cols + c] {
                self.pos_scale[g]
            } else {
                self.neg_scale[g]
            }
        })
    }

    /// Payload size: one bit per entry plus two 64-bit scales per group.
    pub fn payload_bits(&self) -> u64 {
        self.signs.len() as u64 + 128 * self.pos_scale.len() as u64
    }
}

/// Compression relative to sending 64-bit floats.
pub fn compression_ratio(rows: usize, cols: usize, granularity: Granularity) -> f64 {
    let groups = match granularity {
        Granularity::PerColumn => cols,
        Granularity::PerTensor => 1,
    };
    (64 * rows * cols) as f64 / (rows * cols + 128 * groups) as f64
}

/// Quantizes `input` (gradient plus carried residual) to one bit per entry.
/// Entries `> 0` map to the mean of the positive entries of their group,
/// all others to the mean of the non-positive ones. Returns the new residual
/// `input - dequantized`.
pub fn quantize_1bit(input: &Array2<f64>, granularity: Granularity) -> (QuantizedGradient, Array2<f64>) {
    let (rows, cols) = input.dim();
    let groups = match granularity {
        Granularity::PerColumn => cols,
        Granularity::PerTensor => 1,
    };
    let mut signs = bitvec![u64, Lsb0; 0; rows * cols];
    let mut pos = vec![(0.0, 0usize); groups];
    let mut neg = vec![(0.0, 0usize); groups];
    for ((r, c), &x) in input.indexed_iter() {
        let g = if groups == 1 { 0 } else { c };
        if x > 0.0 {
            signs.set(r * cols + c, true);
            pos[g].0 += x;
            pos[g].1 += 1;
        } else {
            neg[g].0 += x;
            neg[g].1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    let q = QuantizedGradient {
        rows,
        cols,
        signs,
        pos_scale: pos.into_iter().map(mean).collect(),
        neg_scale: neg.into_iter().map(mean).collect(),
        granularity,
    };
    let residual = input - &q.dequantize();
    (q, residual)
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// A differentiable loss over indexed training examples.
pub trait Objective: Sync {
    /// Parameter matrix shape.
    fn shape(&self) -> (usize, usize);
    fn num_examples(&self) -> usize;
    /// Mean loss over `idx`.
    fn loss(&self, params: &Array2<f64>, idx: &[usize]) -> f64;
    /// Summed gradient over `idx`.
    fn gradient(&self, params: &Array2<f64>, idx: &[usize]) -> Array2<f64>;

    fn full_loss(&self, params: &Array2<f64>) -> f64 {
        let all: Vec<usize> = (0..self.num_examples()).collect();
        self.loss(params, &all)
    }
}

/// Binary logistic regression with a bias column folded into the features.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
}

impl LogisticRegression {
    /// Seeded synthetic problem: Gaussian features, labels drawn from a
    /// random true model.
    pub fn synthetic(n: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).expect("unit normal");
        let w: Array1<f64> = (0..dim).map(|_| nd.sample(&mut rng)).collect();
        let mut features = Array2::from_shape_fn((n, dim), |_| nd.sample(&mut rng));
        features.column_mut(dim - 1).fill(1.0);
        let labels = features
            .rows()
            .into_iter()
            .map(|x| {
                let p = sigmoid(x.dot(&w));
                if rand::Rng::random::<f64>(&mut rng) < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self { features, labels }
    }
}

impl Objective for LogisticRegression {
    fn shape(&self) -> (usize, usize) {
        (self.features.ncols(), 1)
    }

    fn num_examples(&self) -> usize {
        self.labels.len()
    }

    fn loss(&self, params: &Array2<f64>, idx: &[usize]) -> f64 {
        let w = params.column(0);
        let total: f64 = idx
            .iter()
            .map(|&i| {
                let z = self.features.row(i).dot(&w);
                // -log p(y|x) = softplus(z) - y z
                softplus(z) - self.labels[i] * z
            })
            .sum();
        total / idx.len().max(1) as f64
    }

    fn gradient(&self, params: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
        let w = params.column(0);
        let mut g = Array1::<f64>::zeros(w.len());
        for &i in idx {
            let x = self.features.row(i);
            let e = sigmoid(x.dot(&w)) - self.labels[i];
            g.scaled_add(e, &x);
        }
        g.insert_axis(Axis(1))
    }
}

/// `0.5 * ||w - c_i||^2` with one centre per example.
#[derive(Debug, Clone)]
pub struct QuadraticBowl {
    pub centres: Array2<f64>,
    pub shape: (usize, usize),
}

impl QuadraticBowl {
    /// Every example shares the same centre, so every batch gives the same
    /// step direction.
    pub fn identical(n: usize, shape: (usize, usize), centre: f64) -> Self {
        Self { centres: Array2::from_elem((n, shape.0 * shape.1), centre), shape }
    }
}

impl Objective for QuadraticBowl {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn num_examples(&self) -> usize {
        self.centres.nrows()
    }

    fn loss(&self, params: &Array2<f64>, idx: &[usize]) -> f64 {
        let w = params.iter();
        let flat: Vec<f64> = w.copied().collect();
        let total: f64 = idx
            .iter()
            .map(|&i| 0.5 * self.centres.row(i).iter().zip(&flat).map(|(c, x)| (x - c).powi(2)).sum::<f64>())
            .sum();
        total / idx.len().max(1) as f64
    }

    fn gradient(&self, params: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
        let mut g = Array2::zeros(self.shape);
        for &i in idx {
            for (gv, (x, c)) in g.iter_mut().zip(params.iter().zip(self.centres.row(i))) {
                *gv += x - c;
            }
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub workers: usize,
    pub quantize: bool,
    pub granularity: Granularity,
    pub learning_rate: f64,
    /// Global minibatch size, split evenly over workers.
    pub minibatch: usize,
    pub seed: u64,
    /// Compute worker gradients on the rayon pool. Results are identical
    /// either way.
    pub threaded: bool,
    pub probe_steps: usize,
    pub probe_tolerance: f64,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            quantize: true,
            granularity: Granularity::PerColumn,
            learning_rate: 0.01,
            minibatch: 32,
            seed: 0,
            threaded: true,
            probe_steps: 5,
            probe_tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub id: usize,
    pub replica: Array2<f64>,
    pub residual: Array2<f64>,
    pub shard: Vec<usize>,
    cursor: usize,
}

impl WorkerState {
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            out.push(self.shard[self.cursor]);
            self.cursor = (self.cursor + 1) % self.shard.len();
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub minibatch: usize,
    pub bytes: u64,
    /// Mean loss over the round's minibatch, before the update.
    pub loss: f64,
}

/// Run report, serialisable as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rounds: Vec<RoundStats>,
    pub epoch_losses: Vec<f64>,
    pub bytes_transmitted: u64,
    pub float_bytes: u64,
    pub compression_ratio: f64,
    pub minibatch_sizes: Vec<usize>,
    /// Largest residual sup-norm seen, relative to the gradient sup-norm of
    /// the same round.
    pub max_residual_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct ParallelTrainer<'a, O: Objective> {
    pub objective: &'a O,
    pub config: ParallelConfig,
    pub model: Array2<f64>,
    pub workers: Vec<WorkerState>,
    pub report: RunReport,
    /// Per-worker running sums of true sub-gradients and transmitted
    /// values, for conservation checks.
    pub gradient_sums: Vec<Array2<f64>>,
    pub transmitted_sums: Vec<Array2<f64>>,
}

impl<'a, O: Objective> ParallelTrainer<'a, O> {
    /// Shuffles the example indices with the seed and deals them round-robin
    /// into one shard per worker.
    pub fn new(objective: &'a O, config: ParallelConfig, init: Array2<f64>) -> Result<Self, ParallelError> {
        if config.workers == 0 || config.minibatch == 0 {
            return Err(ParallelError::InvalidConfig("workers and minibatch must be positive".into()));
        }
        if init.dim() != objective.shape() {
            return Err(ParallelError::InvalidConfig("initial model has the wrong shape".into()));
        }
        if objective.num_examples() < config.workers {
            return Err(ParallelError::InvalidConfig("fewer examples than workers".into()));
        }
        let mut order: Vec<usize> = (0..objective.num_examples()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        let shards = (0..config.workers)
            .map(|k| order.iter().skip(k).step_by(config.workers).copied().collect())
            .collect();
        Self::with_shards(objective, config, init, shards)
    }

    pub fn with_shards(
        objective: &'a O,
        config: ParallelConfig,
        init: Array2<f64>,
        shards: Vec<Vec<usize>>,
    ) -> Result<Self, ParallelError> {
        if shards.len() != config.workers || shards.iter().any(Vec::is_empty) {
            return Err(ParallelError::InvalidConfig("need one non-empty shard per worker".into()));
        }
        let zeros = Array2::zeros(init.dim());
        let workers = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| WorkerState { id, replica: init.clone(), residual: zeros.clone(), shard, cursor: 0 })
            .collect();
        let n = config.workers;
        Ok(Self {
            objective,
            config,
            model: init,
            workers,
            report: RunReport::default(),
            gradient_sums: vec![zeros.clone(); n],
            transmitted_sums: vec![zeros; n],
        })
    }

    fn local_batch(&self, global: usize) -> usize {
        global.div_ceil(self.config.workers)
    }

    /// One synchronous round over explicit per-worker batches: every worker
    /// computes its summed sub-gradient on its replica, optionally quantizes
    /// it with error feedback, and the shared model takes one step with the
    /// sum of the transmitted sub-gradients in worker order.
    pub fn aggregate_and_step(&mut self, batches: &[Vec<usize>]) -> Result<(), ParallelError> {
        if batches.len() != self.workers.len() {
            return Err(ParallelError::InvalidConfig("one batch per worker required".into()));
        }
        for w in &self.workers {
            if w.replica != self.model {
                return Err(ParallelError::SyncError(w.id));
            }
        }
        let objective = self.objective;
        let cfg = &self.config;
        let work = |(w, batch): (&mut WorkerState, &Vec<usize>)| -> (Array2<f64>, Array2<f64>, u64, f64) {
            let g = objective.gradient(&w.replica, batch);
            if cfg.quantize {
                let input = &g + &w.residual;
                let (q, residual) = quantize_1bit(&input, cfg.granularity);
                w.residual = residual;
                (g, q.dequantize(), q.payload_bits().div_ceil(8), objective.loss(&w.replica, batch))
            } else {
                let bytes = 8 * g.len() as u64;
                (g.clone(), g, bytes, objective.loss(&w.replica, batch))
            }
        };
        let results: Vec<_> = if cfg.threaded {
            self.workers.par_iter_mut().zip(batches.par_iter()).map(work).collect()
        } else {
            self.workers.iter_mut().zip(batches.iter()).map(work).collect()
        };

        let mut total = Array2::<f64>::zeros(self.model.dim());
        let mut bytes = 0;
        let mut loss = 0.0;
        let mut examples = 0;
        let mut residual_ratio: f64 = 0.0;
        for (k, (g, sent, b, l)) in results.into_iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(ParallelError::NonFinite);
            }
            let g_sup = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let r_sup = self.workers[k].residual.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if g_sup > 0.0 {
                residual_ratio = residual_ratio.max(r_sup / g_sup);
            }
            self.gradient_sums[k] += &g;
            self.transmitted_sums[k] += &sent;
            total += &sent;
            bytes += b;
            loss += l * batches[k].len() as f64;
            examples += batches[k].len();
        }
        self.model.scaled_add(-self.config.learning_rate, &total);
        for w in &mut self.workers {
            w.replica.assign(&self.model);
        }
        self.report.rounds.push(RoundStats {
            round: self.report.rounds.len(),
            minibatch: examples,
            bytes,
            loss: loss / examples.max(1) as f64,
        });
        self.report.bytes_transmitted += bytes;
        self.report.float_bytes += 8 * (self.model.len() * self.workers.len()) as u64;
        self.report.compression_ratio = self.report.float_bytes as f64 / self.report.bytes_transmitted.max(1) as f64;
        self.report.max_residual_ratio = self.report.max_residual_ratio.max(residual_ratio);
        Ok(())
    }

    /// One round drawing the next local batch from every shard.
    pub fn step(&mut self) -> Result<(), ParallelError> {
        let b = self.local_batch(self.config.minibatch);
        let batches: Vec<Vec<usize>> = self.workers.iter_mut().map(|w| w.next_batch(b)).collect();
        self.aggregate_and_step(&batches)
    }

    /// Runs `epochs` passes; an epoch is enough rounds to cover the largest
    /// shard once. Records the full training loss after each epoch.
    pub fn train(&mut self, epochs: usize) -> Result<(), ParallelError> {
        for _ in 0..epochs {
            let b = self.local_batch(self.config.minibatch);
            let longest = self.workers.iter().map(|w| w.shard.len()).max().unwrap_or(0);
            for _ in 0..longest.div_ceil(b) {
                self.step()?;
            }
            self.report.minibatch_sizes.push(self.config.minibatch);
            self.report.epoch_losses.push(self.objective.full_loss(&self.model));
        }
        Ok(())
    }

    fn snapshot(&self) -> (Array2<f64>, Vec<WorkerState>, RunReport, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        (
            self.model.clone(),
            self.workers.clone(),
            self.report.clone(),
            self.gradient_sums.clone(),
            self.transmitted_sums.clone(),
        )
    }

    fn restore(&mut self, s: (Array2<f64>, Vec<WorkerState>, RunReport, Vec<Array2<f64>>, Vec<Array2<f64>>)) {
        (self.model, self.workers, self.report, self.gradient_sums, self.transmitted_sums) = s;
    }

    fn probe(&mut self, size: usize, probe: &[usize]) -> Result<f64, ParallelError> {
        let k = self.workers.len();
        let local = self.local_batch(size);
        let mut cursor = 0;
        for _ in 0..self.config.probe_steps {
            let batches: Vec<Vec<usize>> = (0..k)
                .map(|_| {
                    (0..local)
                        .map(|_| {
                            let i = probe[cursor % probe.len()];
                            cursor += 1;
                            i
                        })
                        .collect()
                })
                .collect();
            self.aggregate_and_step(&batches)?;
        }
        Ok(self.objective.loss(&self.model, probe))
    }
}

/// Tries each candidate minibatch size for a few rounds on `probe` from the
/// same parameter snapshot and returns the largest whose probe loss stays
/// within the tolerance of the current size's. The trainer state is
/// restored afterwards. A diverging probe counts as degraded.
pub fn auto_minibatch_scale<O: Objective>(
    trainer: &mut ParallelTrainer<'_, O>,
    candidates: &[usize],
    probe: &[usize],
) -> Result<usize, ParallelError> {
    if probe.is_empty() {
        return Err(ParallelError::InvalidConfig("empty probe subset".into()));
    }
    if candidates.is_empty() || candidates.windows(2).any(|w| w[0] >= w[1]) || candidates.contains(&0) {
        return Err(ParallelError::InvalidConfig("candidate sizes must be positive and ascending".into()));
    }
    let current = trainer.config.minibatch;
    let snap = trainer.snapshot();
    let base = trainer.probe(current, probe)?;
    trainer.restore(snap.clone());
    let mut chosen = current;
    for &c in candidates {
        let loss = match trainer.probe(c, probe) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(ParallelError::NonFinite) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        trainer.restore(snap.clone());
        log::debug!("minibatch probe {}: loss {} (base {})", c, loss, base);
        if loss <= base * (1.0 + trainer.config.probe_tolerance) && c > chosen {
            chosen = c;
        }
    }
    Ok(chosen)
}
