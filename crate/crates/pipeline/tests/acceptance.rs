//! Acceptance suite. Prints one PASS or FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use convasr::config::{system_ids, PipelineConfig};
use convasr::stages::{run_all, AmReport, RescoreReport, Selection, AM, CN, COMBINE, LM, REPORT_FILE, RESCORE, SCORE};
use convasr_core::am::{spatial_penalty, SpatialFilter, HIGH_PASS_KERNEL};
use convasr_core::combine::{cn_decode, em_weights, read_cn_jsonl, rover_combine, CombinationWeights, ConfusionNetwork};
use convasr_core::graph::{DenominatorGraph, SenoneId};
use convasr_core::lm::rnn::{stabilizer_scale, ToyRecurrentLM};
use convasr_core::lm::{
    perplexity, read_corpus, train_ngram, BackoffNgram, Direction, InterpolatedLm, InterpolationSpec, LanguageModelScorer,
    NgramSmoothing, UniformLm, Vocab, DEFAULT_INTERPOLATION,
};
use convasr_core::parallel::{
    compression_ratio, Granularity, LogisticRegression, Objective, ParallelConfig, ParallelTrainer, QuadraticBowl,
};
use convasr_core::rescore::{best_index, dev_wer, hypothesis_wer, oracle_wer, read_nbest_jsonl, NBestList, ScoreWeights};
use convasr_core::score::{align, read_transcripts, score_corpus, score_utterance, EditCosts, ScoreConfig, RATE_ROWS};
use convasr_core::seqtrain::{forward_backward, mmi_objective_with_ce, LogLikeMatrix, NumeratorSupervision};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn open(p: &Path) -> BufReader<File> {
    BufReader::new(File::open(p).unwrap_or_else(|e| panic!("{}: {}", p.display(), e)))
}

fn json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_reader(open(p)).unwrap_or_else(|e| panic!("{}: {}", p.display(), e))
}

// ---------------------------------------------------------------------------
// Path enumeration oracle for the denominator graph
// ---------------------------------------------------------------------------

fn enumerate_paths(g: &DenominatorGraph, t_len: usize) -> Vec<(Vec<usize>, f64)> {
    fn rec(g: &DenominatorGraph, state: usize, left: usize, labels: &mut Vec<usize>, w: f64, out: &mut Vec<(Vec<usize>, f64)>) {
        if left == 0 {
            let f = g.final_weight(state);
            if f > f64::NEG_INFINITY {
                out.push((labels.clone(), w + f));
            }
            return;
        }
        let mut next: Vec<(usize, usize, f64)> = g.arcs_from(state).iter().map(|a| (a.dst, a.senone.index(), a.logprob)).collect();
        if let Some((s, lp)) = g.self_loop(state) {
            next.push((state, s.index(), lp));
        }
        for (dst, s, lp) in next {
            labels.push(s);
            rec(g, dst, left - 1, labels, w + lp, out);
            labels.pop();
        }
    }
    let mut out = Vec::new();
    rec(g, g.start(), t_len, &mut Vec::new(), 0.0, &mut out);
    out
}

/// Log partition function and frame posteriors by brute force.
fn brute_force(g: &DenominatorGraph, ll: &Array2<f64>) -> (f64, Array2<f64>) {
    let (t_len, s_len) = ll.dim();
    let paths = enumerate_paths(g, t_len);
    let scores: Vec<f64> =
        paths.iter().map(|(labels, w)| w + labels.iter().enumerate().map(|(t, &s)| ll[[t, s]]).sum::<f64>()).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logz = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let mut post = Array2::zeros((t_len, s_len));
    for ((labels, _), sc) in paths.iter().zip(&scores) {
        let p = (sc - logz).exp();
        for (t, &s) in labels.iter().enumerate() {
            post[[t, s]] += p;
        }
    }
    (logz, post)
}

fn random_graph(rng: &mut ChaCha8Rng, max_states: usize, senones: usize) -> DenominatorGraph {
    loop {
        let n = rng.random_range(1..=max_states);
        let mut arcs = Vec::new();
        for src in 0..n {
            for dst in 0..n {
                if rng.random_bool(0.45) {
                    arcs.push((src, dst, SenoneId(rng.random_range(0..senones as u32)), rng.random_range(-2.0..0.0)));
                }
            }
        }
        let finals: Vec<f64> =
            (0..n).map(|_| if rng.random_bool(0.7) { rng.random_range(-1.0..0.0) } else { f64::NEG_INFINITY }).collect();
        let g = DenominatorGraph::from_arcs(n, 0, finals, arcs).unwrap();
        if g.num_arcs() > 0 && !enumerate_paths(&g, 1).is_empty() {
            return g;
        }
    }
}

fn random_ll(rng: &mut ChaCha8Rng, t: usize, s: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, s), |_| rng.random_range(-3.0..1.0))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut graphs, mut worst) = (0, 0.0f64);
    while graphs < 30 {
        let g = random_graph(&mut rng, 8, 3);
        let t_len = rng.random_range(1..=5);
        if enumerate_paths(&g, t_len).is_empty() {
            continue;
        }
        let ll = random_ll(&mut rng, t_len, 3);
        let fb = forward_backward(&g, &LogLikeMatrix::new("c1", ll.clone()).unwrap()).unwrap();
        let (logz, post) = brute_force(&g, &ll);
        worst = worst.max((fb.den_logprob - logz).abs());
        worst = worst.max((fb.posteriors.values() - &post).iter().fold(0.0f64, |m, x| m.max(x.abs())));
        graphs += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-8, format!("max deviation {:.3e}", worst))?;
    ensure(secs < 5.0, format!("took {:.2} s", secs))?;
    Ok(format!("{} graphs, max deviation {:.1e}, {:.2} s", graphs, worst, secs))
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        d
    } else {
        d / scale
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 6 {
        let g = random_graph(&mut rng, 6, 3);
        let t_len = rng.random_range(2..=5);
        let paths = enumerate_paths(&g, t_len);
        let Some((labels, _)) = paths.first() else { continue };
        let num = NumeratorSupervision { frames: labels.iter().map(|&s| SenoneId(s as u32)).collect() };
        let base = random_ll(&mut rng, t_len, 3);
        for ce in [0.0, 0.1] {
            let f = |m: Array2<f64>| mmi_objective_with_ce(&g, &LogLikeMatrix::new("fd", m).unwrap(), &num, ce).unwrap().objective;
            let analytic = mmi_objective_with_ce(&g, &LogLikeMatrix::new("c2", base.clone()).unwrap(), &num, ce).unwrap().gradient;
            let fd = Array2::from_shape_fn(base.dim(), |(t, s)| {
                let (mut p, mut m) = (base.clone(), base.clone());
                p[[t, s]] += eps;
                m[[t, s]] -= eps;
                (f(p) - f(m)) / (2.0 * eps)
            });
            worst = worst.max(norm_rel_err(analytic.as_slice().unwrap(), fd.as_slice().unwrap()));
        }
        cases += 1;
    }
    for (rows, cols) in [(4, 4), (3, 5), (2, 8)] {
        let filter = SpatialFilter::new(rows, cols, 0.1);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, grad) = spatial_penalty(&x, &filter).unwrap();
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[i] += eps;
                m[i] -= eps;
                (spatial_penalty(&p, &filter).unwrap().0 - spatial_penalty(&m, &filter).unwrap().0) / (2.0 * eps)
            })
            .collect();
        worst = worst.max(norm_rel_err(&grad, &fd));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-4, format!("relative error {:.3e}", worst))?;
    ensure(secs < 10.0, format!("took {:.2} s", secs))?;
    Ok(format!("{} MMI cases with and without CE, 3 smoothing shapes, max relative error {:.1e}, {:.2} s", cases, worst, secs))
}

// ---------------------------------------------------------------------------
// Spatial smoothing
// ---------------------------------------------------------------------------

fn criterion_3(work: &Path) -> Outcome {
    let kernel_sum: f64 = HIGH_PASS_KERNEL.iter().flatten().sum();
    ensure(kernel_sum == 0.0, format!("kernel sums to {}", kernel_sum))?;
    for (width, value) in [(16, 0.7), (12, -3.25), (32, 1e6), (7, 0.1)] {
        let f = SpatialFilter::for_width(width, 0.1);
        let (p, g) = spatial_penalty(&vec![value; width], &f).unwrap();
        ensure(p == 0.0 && g.iter().all(|&x| x == 0.0), format!("constant {} over width {} gives penalty {}", value, width, p))?;
    }
    let am: AmReport = json(&work.join(AM).join("report.json"));
    ensure(am.smoothed.smoothing_weight == 0.1 && am.unsmoothed.smoothing_weight == 0.0, "unexpected smoothing weights")?;
    let (s, u) = (am.smoothed.neighbor_correlation, am.unsmoothed.neighbor_correlation);
    ensure(s > u, format!("smoothed correlation {:.4} not above unsmoothed {:.4}", s, u))?;
    Ok(format!("kernel sum 0, constant penalty 0, neighbor correlation {:.4} smoothed vs {:.4} unsmoothed", s, u))
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Weighted edit distance by plain dynamic programming.
fn edit_distance(r: &[String], h: &[String], c: &EditCosts) -> u64 {
    let mut d = vec![vec![0u64; h.len() + 1]; r.len() + 1];
    for i in 0..=r.len() {
        for j in 0..=h.len() {
            d[i][j] = match (i, j) {
                (0, 0) => 0,
                (0, _) => d[0][j - 1] + c.ins as u64,
                (_, 0) => d[i - 1][0] + c.del as u64,
                _ => {
                    let sub = if r[i - 1] == h[j - 1] { 0 } else { c.sub as u64 };
                    (d[i - 1][j - 1] + sub).min(d[i - 1][j] + c.del as u64).min(d[i][j - 1] + c.ins as u64)
                }
            };
        }
    }
    d[r.len()][h.len()]
}

fn criterion_4(work: &Path) -> Outcome {
    let cfg = ScoreConfig::default();
    for (r, h, want) in [("a b c", "a b c", 0.0), ("a b c", "a x c", 100.0 / 3.0), ("a b", "a b c", 50.0)] {
        let wer = score_utterance(&words(r), &words(h), &cfg).unwrap().1.wer;
        ensure(wer == want, format!("{:?} vs {:?}: {} instead of {}", r, h, wer, want))?;
    }
    ensure(format!("{:.3}", 100.0f64 / 3.0) == "33.333", "fixture formatting")?;

    const VOCAB: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut pairs = 0;
    for costs in [EditCosts { sub: 1, ins: 1, del: 1 }, EditCosts::default()] {
        for _ in 0..300 {
            let r: Vec<String> = (0..10).map(|_| VOCAB[rng.random_range(0..6)].to_string()).collect();
            let n = rng.random_range(0..=12);
            let h: Vec<String> = (0..n).map(|_| VOCAB[rng.random_range(0..6)].to_string()).collect();
            let got = align(&r, &h, &costs).cost(&costs);
            let want = edit_distance(&r, &h, &costs);
            ensure(got == want, format!("{:?} / {:?}: cost {} vs oracle {}", r, h, got, want))?;
            pairs += 1;
        }
    }

    let text = fs::read_to_string(work.join(SCORE).join(REPORT_FILE)).unwrap();
    for row in RATE_ROWS {
        ensure(text.lines().any(|l| l.starts_with(&format!("| {} ", row))), format!("report lacks the {} row", row))?;
    }
    for table in ["substitutions", "deletions", "insertions"] {
        ensure(text.contains(&format!("top 10 {}", table)), format!("report lacks the {} table", table))?;
    }
    Ok(format!("fixtures 0 / 33.333 / 50 exact, {} random pairs match the DP oracle, rate table with sub/del/ins/all", pairs))
}

// ---------------------------------------------------------------------------
// Combination
// ---------------------------------------------------------------------------

fn load_cns(work: &Path, sys: &str, split: &str) -> BTreeMap<String, ConfusionNetwork> {
    read_cn_jsonl(open(&work.join(CN).join(format!("{}.{}.jsonl", sys, split))))
        .unwrap()
        .into_iter()
        .map(|c| (c.utt_id.clone(), c))
        .collect()
}

fn refs(work: &Path, split: &str) -> BTreeMap<String, Vec<String>> {
    read_transcripts(open(&work.join("world").join(split).join("text"))).unwrap()
}

fn corpus_wer(refs: &BTreeMap<String, Vec<String>>, hyps: &BTreeMap<String, Vec<String>>) -> f64 {
    score_corpus(refs, hyps, &ScoreConfig::default()).unwrap().1.wer
}

fn criterion_5(work: &Path) -> Outcome {
    let ids = system_ids(3);
    let sel: Selection = json(&work.join(COMBINE).join("selection.json"));
    let eval_refs = refs(work, "eval");

    // best single system, both as consensus output and as rescored 1-best
    let mut best_single = f64::INFINITY;
    for id in &ids {
        let cn: BTreeMap<String, Vec<String>> = load_cns(work, id, "eval").iter().map(|(u, c)| (u.clone(), cn_decode(c))).collect();
        best_single = best_single.min(corpus_wer(&eval_refs, &cn));
        let hyp = read_transcripts(open(&work.join(RESCORE).join(format!("{}.eval.hyp", id)))).unwrap();
        best_single = best_single.min(corpus_wer(&eval_refs, &hyp));
    }
    let combined = corpus_wer(&eval_refs, &read_transcripts(open(&work.join(COMBINE).join("eval.hyp"))).unwrap());
    ensure((combined - sel.combined_eval_wer).abs() < 1e-9, "selection.json disagrees with the combined output")?;
    ensure(combined <= best_single, format!("combined {:.2} above best single {:.2}", combined, best_single))?;

    ensure(!sel.dev_trace.is_empty(), "empty dev trace")?;
    ensure(sel.dev_trace.windows(2).all(|w| w[1] < w[0]), format!("dev trace {:?} not strictly decreasing", sel.dev_trace))?;

    let dev_refs = refs(work, "dev");
    let dev: Vec<BTreeMap<String, ConfusionNetwork>> = ids.iter().map(|id| load_cns(work, id, "dev")).collect();
    let per_utt: Vec<Vec<&ConfusionNetwork>> = dev_refs.keys().map(|u| dev.iter().map(|s| &s[u]).collect()).collect();
    let ref_slices: Vec<&[String]> = dev_refs.values().map(Vec::as_slice).collect();
    let em = em_weights(&per_utt, &ref_slices, &CombinationWeights::uniform(3), 0.5).unwrap();
    for w in [&em.weights, &em.raw] {
        let total: f64 = w.0.iter().sum();
        ensure(w.0.iter().all(|&x| x >= 0.0) && (total - 1.0).abs() < 1e-12, format!("EM weights {:?} are not a distribution", w.0))?;
    }
    ensure(em.objective.len() >= 2, "EM ran no iterations")?;
    ensure(em.objective.windows(2).all(|w| w[1] >= w[0]), format!("EM objective decreased: {:?}", em.objective))?;

    let eval: Vec<BTreeMap<String, ConfusionNetwork>> = ids.iter().map(|id| load_cns(work, id, "eval")).collect();
    let one_hot = CombinationWeights(vec![1.0, 0.0, 0.0]);
    for u in eval_refs.keys() {
        let cns: Vec<&ConfusionNetwork> = eval.iter().map(|s| &s[u]).collect();
        let out = rover_combine(&cns, &one_hot).unwrap();
        ensure(out == *cns[0] && cn_decode(&out) == cn_decode(cns[0]), format!("weights (1,0,0) changed {}", u))?;
    }
    let ws: Vec<String> = em.weights.0.iter().map(|w| format!("{:.3}", w)).collect();
    Ok(format!(
        "combined eval WER {:.2} <= best single {:.2}; dev trace {:?}; EM weights [{}] over {} monotone steps; (1,0,0) reproduces sys0",
        combined,
        best_single,
        sel.dev_trace.iter().map(|x| format!("{:.2}", x)).collect::<Vec<_>>(),
        ws.join(", "),
        em.objective.len() - 1
    ))
}

// ---------------------------------------------------------------------------
// Language models and rescoring
// ---------------------------------------------------------------------------

fn load_vocab(work: &Path) -> Vocab {
    let mut v: Vocab = json(&work.join(LM).join("vocab.json"));
    v.reindex();
    v
}

fn load_rnn(work: &Path, name: &str) -> ToyRecurrentLM {
    ToyRecurrentLM::load(open(&work.join(LM).join(format!("rnn_{}.json", name)))).unwrap()
}

fn valid_text(work: &Path) -> Vec<Vec<String>> {
    read_corpus(open(&work.join("world").join("lm").join("valid.txt"))).unwrap()
}

/// Largest deviation from one of the total probability over every prefix
/// of the first sentences.
fn normalization_gap(lm: &dyn LanguageModelScorer, text: &[Vec<String>]) -> (f64, usize) {
    let (mut worst, mut contexts) = (0.0f64, 0);
    for s in text.iter().take(40) {
        let ids = lm.direction().arrange(&lm.vocab().encode(s));
        for i in 0..=ids.len() {
            let total: f64 = lm.distribution(&ids[..i]).iter().map(|lp| lp.exp()).sum();
            worst = worst.max((total - 1.0).abs());
            contexts += 1;
        }
    }
    (worst, contexts)
}

fn read_lists(work: &Path, sys: &str, split: &str) -> Vec<NBestList> {
    read_nbest_jsonl(open(&work.join(RESCORE).join(format!("{}.{}.jsonl", sys, split)))).unwrap()
}

fn read_weights(work: &Path, file: &str) -> ScoreWeights {
    ScoreWeights::read_json(open(&work.join(RESCORE).join(file))).unwrap()
}

fn criterion_6(work: &Path) -> Outcome {
    let ng = BackoffNgram::load(open(&work.join(LM).join("ngram_fwd.json"))).unwrap();
    let (word, ltr) = (load_rnn(work, "word_fwd"), load_rnn(work, "ltr_fwd"));
    let spec = InterpolationSpec::new(DEFAULT_INTERPOLATION.to_vec()).unwrap();
    let mix = InterpolatedLm::new(vec![&word, &ltr, &ng], spec).unwrap();
    let (gap, contexts) = normalization_gap(&mix, &valid_text(work));
    ensure(gap <= 1e-9, format!("interpolated distribution off by {:.3e}", gap))?;

    let report: RescoreReport = json(&work.join(RESCORE).join("report.json"));
    let dev_refs = refs(work, "dev");
    let mut lines = Vec::new();
    for id in system_ids(3) {
        let dev: Vec<(NBestList, Vec<String>)> =
            read_lists(work, &id, "dev").into_iter().map(|l| { let r = dev_refs[&l.utt_id].clone(); (l, r) }).collect();
        let cfg = ScoreConfig::default();
        let ngram = dev_wer(&dev, &read_weights(work, &format!("{}.ngram_weights.json", id)), &cfg).unwrap();
        let full = dev_wer(&dev, &read_weights(work, &format!("{}.weights.json", id)), &cfg).unwrap();
        let rec = &report.systems[&id].wer["dev"];
        ensure((rec.ngram - ngram).abs() < 1e-9 && (rec.full - full).abs() < 1e-9, format!("{}: report disagrees with the lists", id))?;
        ensure(full <= ngram, format!("{}: full dev WER {:.2} above N-gram only {:.2}", id, full, ngram))?;
        lines.push(format!("{} {:.2} <= {:.2}", id, full, ngram));
    }
    Ok(format!("interpolation normalized within {:.1e} over {} contexts; dev WER full vs N-gram: {}", gap, contexts, lines.join(", ")))
}

fn criterion_7(work: &Path) -> Outcome {
    let vocab = load_vocab(work);
    let lm_dir = work.join("world").join("lm");
    let mut train = read_corpus(open(&lm_dir.join("in_domain.txt"))).unwrap();
    train.extend(read_corpus(open(&lm_dir.join("out_domain.txt"))).unwrap());
    let valid = valid_text(work);
    let ppl = |order: usize| {
        let m = train_ngram(&train, &vocab, order, NgramSmoothing::WittenBell, Direction::Forward).unwrap();
        perplexity(&m, &valid).unwrap().perplexity
    };
    let (tri, uni) = (ppl(3), ppl(1));
    ensure(tri <= uni, format!("trigram {:.3} above unigram {:.3}", tri, uni))?;

    let uniform = perplexity(&UniformLm { vocab: vocab.clone(), direction: Direction::Forward }, &valid).unwrap().perplexity;
    let outcomes = vocab.num_outcomes() as f64;
    ensure((uniform - outcomes).abs() <= 1e-9 * outcomes, format!("uniform perplexity {} vs {} outcomes", uniform, outcomes))?;

    let mut worst = 0.0f64;
    for name in ["word_fwd", "ltr_fwd", "word_bwd", "ltr_bwd"] {
        worst = worst.max(normalization_gap(&load_rnn(work, name), &valid).0);
    }
    ensure(worst <= 1e-9, format!("recurrent distribution off by {:.3e}", worst))?;

    let s0 = stabilizer_scale(0.0);
    ensure((s0 - std::f64::consts::LN_2 / 4.0).abs() <= 1e-9, format!("stabilizer_scale(0) = {}", s0))?;
    let grid: Vec<f64> = (-2000..=2000).map(|i| stabilizer_scale(i as f64 * 0.005)).collect();
    ensure(grid.windows(2).all(|w| w[1] > w[0]), "stabilizer scale not increasing")?;
    Ok(format!(
        "trigram {:.2} <= unigram {:.2}; uniform {:.6} = {} outcomes; recurrent normalized within {:.1e}; stabilizer_scale(0) = {:.12}",
        tri, uni, uniform, outcomes, worst, s0
    ))
}

// ---------------------------------------------------------------------------
// 1-bit SGD
// ---------------------------------------------------------------------------

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn criterion_8() -> Outcome {
    let obj = LogisticRegression::synthetic(2048, 16, 3);

    // conservation: transmitted sum plus residual equals the gradient sum
    let cfg = ParallelConfig { workers: 4, quantize: true, minibatch: 64, learning_rate: 0.005, ..Default::default() };
    let mut t = ParallelTrainer::new(&obj, cfg, Array2::zeros(obj.shape())).unwrap();
    t.train(3).unwrap();
    let rounds = t.report.rounds.len() as f64;
    let mut conservation = 0.0f64;
    for k in 0..4 {
        let scale = t.gradient_sums[k].iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let d = max_abs_diff(&(&t.transmitted_sums[k] + &t.workers[k].residual), &t.gradient_sums[k]);
        ensure(d <= 4.0 * rounds * f64::EPSILON * scale, format!("worker {} drifts by {:.3e}", k, d))?;
        conservation = conservation.max(d / scale);
    }

    // quantization off against serial SGD on the concatenated batches
    let (lr, rounds) = (0.005, 30);
    let cfg = ParallelConfig { workers: 4, quantize: false, minibatch: 64, learning_rate: lr, ..Default::default() };
    let mut t = ParallelTrainer::new(&obj, cfg, Array2::zeros(obj.shape())).unwrap();
    let shards: Vec<Vec<usize>> = t.workers.iter().map(|w| w.shard.clone()).collect();
    let mut serial = Array2::zeros(obj.shape());
    for r in 0..rounds {
        t.step().unwrap();
        let batch: Vec<usize> = shards.iter().flat_map(|s| s[r * 16..(r + 1) * 16].iter().copied()).collect();
        let g = obj.gradient(&serial, &batch);
        serial.scaled_add(-lr, &g);
    }
    let serial_diff = max_abs_diff(&t.model, &serial);
    ensure(serial_diff <= 1e-12, format!("unquantized run differs from serial by {:.3e}", serial_diff))?;

    let run = |quantize: bool| {
        let cfg = ParallelConfig { workers: 4, quantize, minibatch: 64, learning_rate: 0.005, seed: 7, ..Default::default() };
        let mut t = ParallelTrainer::new(&obj, cfg, Array2::zeros(obj.shape())).unwrap();
        t.train(5).unwrap();
        obj.full_loss(&t.model)
    };
    let (float_loss, q_loss) = (run(false), run(true));
    let rel = (q_loss - float_loss).abs() / float_loss;
    ensure(rel <= 0.02, format!("quantized loss {:.5} vs float {:.5}", q_loss, float_loss))?;

    let bowl = QuadraticBowl::identical(8, (512, 512), 1.0);
    let cfg = ParallelConfig { workers: 4, minibatch: 8, learning_rate: 0.01, ..Default::default() };
    let mut t = ParallelTrainer::new(&bowl, cfg, Array2::zeros((512, 512))).unwrap();
    t.step().unwrap();
    let reported = t.report.compression_ratio;
    let formula = compression_ratio(512, 512, Granularity::PerColumn);
    ensure(reported >= 20.0 && formula >= 20.0, format!("compression {:.1} (formula {:.1})", reported, formula))?;
    Ok(format!(
        "conservation within {:.1e} relative; serial gap {:.1e}; quantized loss {:.2}% from float; compression {:.1}x at 512x512",
        conservation,
        serial_diff,
        100.0 * rel,
        reported
    ))
}

// ---------------------------------------------------------------------------
// Whole pipeline
// ---------------------------------------------------------------------------

fn run_pipeline(work: &Path) -> Result<String, String> {
    let cfg = PipelineConfig { work_dir: work.to_path_buf(), ..Default::default() };
    run_all(&cfg).map_err(|e| e.to_string())
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9(first: &Path, second: &Path) -> Outcome {
    let start = Instant::now();
    run_pipeline(second)?;
    let secs = start.elapsed().as_secs_f64();
    let (a, b) = (tree(first), tree(second));
    let reports = a.keys().filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("report"))).count();
    ensure(a.keys().eq(b.keys()), "runs wrote different file sets")?;
    if let Some(p) = a.keys().find(|p| a[*p] != b[*p]) {
        return Err(format!("{} differs between runs", p.display()));
    }
    Ok(format!("second run ({:.1} s) matches the first byte for byte: {} files, {} reports", secs, a.len(), reports))
}

fn criterion_10(work: &Path) -> Outcome {
    let eval_refs = refs(work, "eval");
    let cfg = ScoreConfig::default();
    let mut checked = 0;
    for id in system_ids(3) {
        let w = read_weights(work, &format!("{}.weights.json", id));
        for list in read_lists(work, &id, "eval") {
            let r = &eval_refs[&list.utt_id];
            let one_best = hypothesis_wer(r, &list.hypotheses[best_index(&list, &w).unwrap()].words, &cfg).unwrap();
            let oracle = oracle_wer(&list, r, &cfg).unwrap();
            let by_hand = list.hypotheses.iter().map(|h| hypothesis_wer(r, &h.words, &cfg).unwrap()).fold(f64::INFINITY, f64::min);
            ensure(oracle == by_hand, format!("{} {}: oracle {} vs minimum {}", id, list.utt_id, oracle, by_hand))?;
            ensure(oracle <= one_best, format!("{} {}: oracle {} above 1-best {}", id, list.utt_id, oracle, one_best))?;
            checked += 1;
        }
    }
    ensure(checked == 3 * eval_refs.len(), format!("{} lists for {} utterances", checked, eval_refs.len()))?;
    Ok(format!("oracle <= 1-best on all {} system-utterance pairs", checked))
}

fn report(n: usize, outcome: std::thread::Result<Outcome>) -> bool {
    let outcome = outcome.unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    match outcome {
        Ok(msg) => {
            println!("PASS criterion {}: {}", n, msg);
            true
        }
        Err(msg) => {
            println!("FAIL criterion {}: {}", n, msg);
            false
        }
    }
}

fn main() -> ExitCode {
    let first = tempfile::tempdir().expect("temp dir");
    let second = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let pipeline = run_pipeline(first.path());
    if let Err(e) = &pipeline {
        println!("pipeline run failed: {}", e);
    } else {
        println!("seed-17 pipeline run took {:.1} s", start.elapsed().as_secs_f64());
    }
    let w = first.path();
    let needs_run = |f: &dyn Fn() -> Outcome| -> Outcome {
        match &pipeline {
            Ok(_) => f(),
            Err(e) => Err(format!("pipeline failed: {}", e)),
        }
    };

    let mut ok = true;
    ok &= report(1, catch_unwind(criterion_1));
    ok &= report(2, catch_unwind(criterion_2));
    ok &= report(3, catch_unwind(AssertUnwindSafe(|| needs_run(&|| criterion_3(w)))));
    ok &= report(4, catch_unwind(AssertUnwindSafe(|| needs_run(&|| criterion_4(w)))));
    ok &= report(5, catch_unwind(AssertUnwindSafe(|| needs_run(&|| criterion_5(w)))));
    ok &= report(6, catch_unwind(AssertUnwindSafe(|| needs_run(&|| criterion_6(w)))));
    ok &= report(7, catch_unwind(AssertUnwindSafe(|| needs_run(&|| criterion_7(w)))));
    ok &= report(8, catch_unwind(criterion_8));
    ok &= report(9, catch_unwind(AssertUnwindSafe(|| needs_run(&|| criterion_9(w, second.path())))));
    ok &= report(10, catch_unwind(AssertUnwindSafe(|| needs_run(&|| criterion_10(w)))));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
