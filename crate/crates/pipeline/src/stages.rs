//! Pipeline stages. Each stage checks the manifests of the stages it reads
//! from, writes its artifacts under its own directory in the work dir and
//! finishes by writing its manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use convasr_core::am::{
    evaluate, neighbor_correlation, train_toy_am, AmConfig, AmTrainConfig, AmUtterance, LossTrace, Objective, Smoothing,
    SpeakerMode, SpeakerVector, ToyAcousticModel,
};
use convasr_core::combine::{
    build_confusion_network, cn_decode, combine_group, read_cn_jsonl, two_stage_combine, wer_of_networks, write_cn_jsonl,
    CnCosts, ConfusionNetwork, GreedyConfig, System, SystemSet, WeightSearch,
};
use convasr_core::graph::{
    build_denominator_graph, compress_senones, estimate_mixed_history_lm, read_alignments, SenoneAlignment, SenoneTable,
    TransitionModel, STATES_PER_PHONE,
};
use convasr_core::lm::{
    perplexity, read_corpus, train_ngram, train_recurrent_lm, BackoffNgram, CellType, Direction, InputEncoding,
    InterpolatedLm, InterpolationSpec, LanguageModelScorer, NgramSmoothing, RnnConfig, RnnTrainConfig, ToyRecurrentLM,
    UniformLm, Vocab,
};
use convasr_core::rescore::{
    dev_wer, lm_features, optimize_weights, read_nbest_jsonl, rescore_lists, write_nbest_jsonl, NBestList, OptimizeConfig,
    ScoreWeights, AM_SCORE, NEURAL_BWD, NEURAL_FWD, NGRAM_LM, OOV_COUNT, WORD_COUNT,
};
use convasr_core::score::{
    error_tables, read_transcripts, score_corpus, score_utterance, write_transcripts, ComparisonTable, ErrorTables,
    RateTable, ScoreConfig, TableKind,
};

use crate::config::{system_ids, PipelineConfig, SearchKind};
use crate::error::{PipelineError, Result};
use crate::manifest::{config_hash, verify_inputs, write_manifest};
use crate::world::{read_features, substream, World, SCORED_SPLITS};

pub const WORLD: &str = "world";
pub const AM: &str = "am";
pub const LM: &str = "lm";
pub const RESCORE: &str = "rescore";
pub const CN: &str = "cn";
pub const COMBINE: &str = "combine";
pub const SCORE: &str = "score";
pub const REPORT_FILE: &str = "report.txt";

/// The four recurrent models: word and letter-trigram input, each direction.
pub const RNN_MODELS: [(&str, InputEncoding, Direction); 4] = [
    ("word_fwd", InputEncoding::OneHot, Direction::Forward),
    ("ltr_fwd", InputEncoding::LetterTrigram, Direction::Forward),
    ("word_bwd", InputEncoding::OneHot, Direction::Backward),
    ("ltr_bwd", InputEncoding::LetterTrigram, Direction::Backward),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Stage {
    Gen,
    TrainAm,
    TrainLm,
    Rescore,
    Cn,
    Combine,
    Score,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Gen, Stage::TrainAm, Stage::TrainLm, Stage::Rescore, Stage::Cn, Stage::Combine, Stage::Score];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::TrainAm => "train-am",
            Stage::TrainLm => "train-lm",
            Stage::Rescore => "rescore",
            Stage::Cn => "cn",
            Stage::Combine => "combine",
            Stage::Score => "score",
        }
    }

    /// Output directory inside the work dir.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Gen => WORLD,
            Stage::TrainAm => AM,
            Stage::TrainLm => LM,
            Stage::Rescore => RESCORE,
            Stage::Cn => CN,
            Stage::Combine => COMBINE,
            Stage::Score => SCORE,
        }
    }

    pub fn enabled(self, cfg: &PipelineConfig) -> bool {
        let s = &cfg.stages;
        match self {
            Stage::Gen => s.gen,
            Stage::TrainAm => s.train_am,
            Stage::TrainLm => s.train_lm,
            Stage::Rescore => s.rescore,
            Stage::Cn => s.cn,
            Stage::Combine => s.combine,
            Stage::Score => s.score,
        }
    }
}

pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    log::info!("stage {}", stage.name());
    let ctx = Ctx { cfg, work: cfg.work_dir.clone() };
    let r = match stage {
        Stage::Gen => gen(&ctx),
        Stage::TrainAm => train_am(&ctx),
        Stage::TrainLm => train_lm(&ctx),
        Stage::Rescore => rescore(&ctx),
        Stage::Cn => cn(&ctx),
        Stage::Combine => combine(&ctx),
        Stage::Score => score(&ctx),
    };
    r.map_err(|e| e.in_stage(stage.name()))
}

/// Runs every enabled stage in order, then writes the summary report.
pub fn run_all(cfg: &PipelineConfig) -> Result<String> {
    cfg.validate()?;
    for stage in Stage::ALL {
        if stage.enabled(cfg) {
            run_stage(cfg, stage)?;
        }
    }
    write_report(&cfg.work_dir)
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    work: PathBuf,
}

impl Ctx<'_> {
    /// Empties and recreates a stage directory.
    fn fresh_dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.work.join(name);
        if d.exists() {
            std::fs::remove_dir_all(&d).map_err(|e| PipelineError::io(&d, e))?;
        }
        std::fs::create_dir_all(&d).map_err(|e| PipelineError::io(&d, e))?;
        Ok(d)
    }

    fn path(&self, stage: &str, rel: &str) -> PathBuf {
        self.work.join(stage).join(rel)
    }

    fn score_config(&self) -> ScoreConfig {
        ScoreConfig { optional: self.cfg.score.optional_words.iter().cloned().collect(), ..Default::default() }
    }

    fn seed_for(&self, name: &str) -> u64 {
        substream(self.cfg.seed, name).next_u64()
    }
}

fn open(p: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(p).map_err(|e| PipelineError::io(p, e))?))
}

fn create(p: &Path) -> Result<File> {
    File::create(p).map_err(|e| PipelineError::io(p, e))
}

fn write_text(p: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&p, text).map_err(|e| PipelineError::io(&p, e))?;
    Ok(p)
}

fn write_json<T: Serialize>(p: PathBuf, value: &T) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_text(p, &text)
}

fn read_refs(p: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    Ok(read_transcripts(open(p)?)?)
}

fn write_hyps(p: PathBuf, hyps: &BTreeMap<String, Vec<String>>) -> Result<PathBuf> {
    write_transcripts(create(&p)?, hyps)?;
    Ok(p)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn gen(ctx: &Ctx) -> Result<()> {
    let world = World::generate(ctx.cfg.seed, &ctx.cfg.world);
    let mut seen = BTreeSet::new();
    for utts in world.splits.values() {
        for u in utts {
            if !seen.insert(&u.utt_id) {
                return Err(PipelineError::Model(format!("utterance {} appears in two splits", u.utt_id)));
            }
        }
    }
    let dir = ctx.fresh_dir(WORLD)?;
    let outputs = world.write(&dir)?;
    let hash = config_hash(&(ctx.cfg.seed, &ctx.cfg.world));
    write_manifest(&ctx.work, WORLD, hash, BTreeMap::new(), BTreeMap::new(), &outputs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train-am
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmRunSummary {
    pub smoothing_weight: f64,
    pub loss: LossTrace,
    pub dev_cross_entropy: f64,
    pub dev_frame_accuracy: f64,
    pub neighbor_correlation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmReport {
    pub graph_states: usize,
    pub graph_arcs: usize,
    pub smoothed: AmRunSummary,
    pub unsmoothed: AmRunSummary,
}

fn load_am_split(
    ctx: &Ctx,
    split: &str,
    table: &SenoneTable,
    speakers: &BTreeMap<String, Vec<f64>>,
    with_speaker: bool,
) -> Result<Vec<AmUtterance>> {
    let mut al: BTreeMap<String, Vec<_>> =
        read_alignments(open(&ctx.path(WORLD, &format!("{}/align.txt", split)))?)?.into_iter().collect();
    let feats = read_features(&ctx.path(WORLD, &format!("{}/feats.jsonl", split)))?;
    let mut out = Vec::with_capacity(feats.len());
    for rec in feats {
        let frames = al
            .remove(&rec.utt_id)
            .ok_or_else(|| PipelineError::Format(format!("no alignment for {}", rec.utt_id)))?;
        SenoneAlignment::new(rec.utt_id.clone(), frames.clone(), table)?;
        let speaker = match speakers.get(&rec.side) {
            Some(v) if with_speaker => {
                Some(SpeakerVector { side_id: rec.side.clone(), values: Array1::from(v.clone()) })
            }
            _ => None,
        };
        out.push(AmUtterance { utt_id: rec.utt_id.clone(), features: rec.matrix()?, targets: frames, speaker });
    }
    if let Some(u) = al.keys().next() {
        return Err(PipelineError::Format(format!("alignment for {} has no features", u)));
    }
    Ok(out)
}

fn frame_accuracy(model: &ToyAcousticModel, data: &[AmUtterance]) -> Result<f64> {
    let per: Vec<(usize, usize)> = data
        .par_iter()
        .map(|u| {
            let ll = model.forward(&u.features, u.speaker.as_ref())?.loglikes;
            let hits = ll
                .rows()
                .into_iter()
                .zip(&u.targets)
                .filter(|(row, s)| {
                    let best = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                    best.0 == s.index()
                })
                .count();
            Ok((hits, u.targets.len()))
        })
        .collect::<Result<_>>()?;
    let (h, n) = per.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(h as f64 / n.max(1) as f64)
}

fn train_am(ctx: &Ctx) -> Result<()> {
    let files: Vec<PathBuf> = ["senones.txt", "speakers.json", "train/align.txt", "train/feats.jsonl", "dev/align.txt", "dev/feats.jsonl"]
        .iter()
        .map(|f| ctx.path(WORLD, f))
        .collect();
    let (inputs, chain) = verify_inputs(&ctx.work, &[WORLD], &files)?;
    let a = &ctx.cfg.am;
    let table = SenoneTable::read(open(&files[0])?)?;
    let speakers: BTreeMap<String, Vec<f64>> = serde_json::from_reader(open(&files[1])?)?;
    let with_speaker = a.speaker_mode != SpeakerMode::None;
    let train = load_am_split(ctx, "train", &table, &speakers, with_speaker)?;
    let dev = load_am_split(ctx, "dev", &table, &speakers, with_speaker)?;

    let aligns: Vec<SenoneAlignment> = train
        .iter()
        .map(|u| SenoneAlignment::new(u.utt_id.clone(), u.targets.clone(), &table))
        .collect::<std::result::Result<_, _>>()?;
    let compressed = aligns.iter().map(compress_senones).collect::<std::result::Result<Vec<_>, _>>()?;
    let hlm = estimate_mixed_history_lm(&compressed, &table, STATES_PER_PHONE)?;
    let graph = build_denominator_graph(&hlm, &TransitionModel::estimate(&aligns))?;
    log::info!("denominator graph: {} states, {} arcs", graph.num_states(), graph.num_arcs());

    let config = AmConfig {
        input_dim: train.first().map_or(0, |u| u.features.ncols()),
        hidden: a.hidden.clone(),
        num_senones: table.inventory_size(),
        nonlinearity: a.nonlinearity,
        speaker_dim: speakers.values().next().map_or(0, Vec::len),
        speaker_mode: a.speaker_mode,
        recurrent: false,
    };
    let objective = Objective::Lfmmi { graph: &graph, ce_weight: a.ce_weight };
    let init_seed = ctx.seed_for("am/init");
    let tcfg = AmTrainConfig { epochs: a.epochs, learning_rate: a.learning_rate, momentum: a.momentum, seed: ctx.seed_for("am/shuffle") };
    let smoothing = Smoothing { weight: a.smoothing_weight, layers: None };
    let runs = [Some(&smoothing), None]
        .par_iter()
        .map(|sm| -> Result<(ToyAcousticModel, AmRunSummary)> {
            let model = ToyAcousticModel::new(config.clone(), init_seed)?;
            let (model, loss) = train_toy_am(model, &train, &objective, *sm, &tcfg)?;
            let summary = AmRunSummary {
                smoothing_weight: sm.map_or(0.0, |s| s.weight),
                loss,
                dev_cross_entropy: evaluate(&model, &dev, &Objective::CrossEntropy, None)?.base,
                dev_frame_accuracy: frame_accuracy(&model, &dev)?,
                neighbor_correlation: neighbor_correlation(&model, &dev, 0)?,
            };
            Ok((model, summary))
        })
        .collect::<Result<Vec<_>>>()?;
    let [(smoothed, s_sum), (plain, p_sum)]: [(ToyAcousticModel, AmRunSummary); 2] =
        runs.try_into().map_err(|_| PipelineError::Model("expected two training runs".into()))?;
    log::info!(
        "neighbor correlation: smoothed {:.4}, unsmoothed {:.4}",
        s_sum.neighbor_correlation,
        p_sum.neighbor_correlation
    );

    let dir = ctx.fresh_dir(AM)?;
    let mut outputs = Vec::new();
    for (name, m) in [("model.json", &smoothed), ("model_unsmoothed.json", &plain)] {
        let p = dir.join(name);
        m.save(std::io::BufWriter::new(create(&p)?))?;
        outputs.push(p);
    }
    let gp = dir.join("graph.txt");
    graph.write_dump(&mut std::io::BufWriter::new(create(&gp)?)).map_err(|e| PipelineError::io(&gp, e))?;
    outputs.push(gp);
    let report = AmReport { graph_states: graph.num_states(), graph_arcs: graph.num_arcs(), smoothed: s_sum, unsmoothed: p_sum };
    outputs.push(write_json(dir.join("report.json"), &report)?);
    write_manifest(&ctx.work, AM, config_hash(&(ctx.cfg.seed, a)), chain, inputs, &outputs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train-lm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RnnSummary {
    pub phase1_perplexity: f64,
    pub final_perplexity: f64,
    pub history: Vec<convasr_core::lm::rnn::EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmReport {
    pub vocab_size: usize,
    pub valid_tokens: usize,
    /// Validation perplexity of every model and mixture.
    pub perplexity: BTreeMap<String, f64>,
    pub rnn: BTreeMap<String, RnnSummary>,
    /// Letter-trigram over word-input perplexity, per direction.
    pub letter_trigram_ratio: BTreeMap<String, f64>,
}

impl LmReport {
    pub fn render(&self) -> String {
        let mut s = format!("vocabulary {} words, validation {} tokens\n", self.vocab_size, self.valid_tokens);
        for (name, p) in &self.perplexity {
            let _ = writeln!(s, "{:<16} {:>10.3}", name, p);
        }
        for (d, r) in &self.letter_trigram_ratio {
            let _ = writeln!(s, "letter-trigram / word perplexity ({}): {:.4}", d, r);
        }
        s
    }
}

fn train_lm(ctx: &Ctx) -> Result<()> {
    let files: Vec<PathBuf> = ["in_domain", "out_domain", "valid"].iter().map(|f| ctx.path(WORLD, &format!("lm/{}.txt", f))).collect();
    let (inputs, chain) = verify_inputs(&ctx.work, &[WORLD], &files)?;
    let l = &ctx.cfg.lm;
    let ind = read_corpus(open(&files[0])?)?;
    let ood = read_corpus(open(&files[1])?)?;
    let valid = read_corpus(open(&files[2])?)?;
    let vocab = Vocab::from_corpus(&ind, l.min_count);
    let mut all = ind.clone();
    all.extend(ood.iter().cloned());
    let ng_fwd = train_ngram(&all, &vocab, l.order, NgramSmoothing::WittenBell, Direction::Forward)?;
    let ng_bwd = train_ngram(&all, &vocab, l.order, NgramSmoothing::WittenBell, Direction::Backward)?;
    let unigram = train_ngram(&all, &vocab, 1, NgramSmoothing::WittenBell, Direction::Forward)?;

    let tcfg = RnnTrainConfig {
        learning_rate: l.learning_rate,
        phase1_passes: l.phase1_passes,
        max_phase2_epochs: l.max_phase2_epochs,
        ..Default::default()
    };
    let trained = RNN_MODELS
        .par_iter()
        .map(|&(name, encoding, direction)| {
            let rc = RnnConfig {
                direction,
                encoding,
                embed_dim: l.embed_dim,
                hidden: vec![l.hidden],
                cell: CellType::Gated,
                extra_layer: l.extra_layer,
                tied: l.extra_layer.unwrap_or(l.hidden) == l.embed_dim,
                stabilize: true,
                seed: ctx.seed_for(&format!("lm/{}", name)),
            };
            Ok((name, train_recurrent_lm(&ind, &ood, &valid, &vocab, &rc, &tcfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let rnn: BTreeMap<&str, _> = trained.into_iter().collect();

    let spec = InterpolationSpec::new(l.interpolation.clone())?;
    let mix_fwd = InterpolatedLm::new(vec![&rnn["word_fwd"].model, &rnn["ltr_fwd"].model, &ng_fwd], spec.clone())?;
    let mix_bwd = InterpolatedLm::new(vec![&rnn["word_bwd"].model, &rnn["ltr_bwd"].model, &ng_bwd], spec)?;
    let uniform = UniformLm { vocab: vocab.clone(), direction: Direction::Forward };
    let mut ppl = BTreeMap::new();
    let mut tokens = 0;
    let scored: Vec<(String, &dyn LanguageModelScorer)> = vec![
        ("uniform".into(), &uniform),
        ("unigram".into(), &unigram),
        ("ngram_fwd".into(), &ng_fwd),
        ("ngram_bwd".into(), &ng_bwd),
        ("mix_fwd".into(), &mix_fwd),
        ("mix_bwd".into(), &mix_bwd),
    ];
    for (name, lm) in scored.iter().map(|(n, m)| (n.clone(), *m)).chain(rnn.iter().map(|(n, t)| (format!("rnn_{}", n), &t.model as &dyn LanguageModelScorer))) {
        let r = perplexity(lm, &valid)?;
        tokens = r.tokens;
        ppl.insert(name, r.perplexity);
    }
    let ratio = [("fwd", "rnn_ltr_fwd", "rnn_word_fwd"), ("bwd", "rnn_ltr_bwd", "rnn_word_bwd")]
        .iter()
        .map(|(d, lt, w)| (d.to_string(), ppl[*lt] / ppl[*w]))
        .collect();
    let report = LmReport {
        vocab_size: vocab.len(),
        valid_tokens: tokens,
        perplexity: ppl,
        rnn: rnn
            .iter()
            .map(|(n, t)| {
                (n.to_string(), RnnSummary { phase1_perplexity: t.phase1_perplexity, final_perplexity: t.final_perplexity, history: t.history.clone() })
            })
            .collect(),
        letter_trigram_ratio: ratio,
    };

    let dir = ctx.fresh_dir(LM)?;
    let mut outputs = vec![write_json(dir.join("vocab.json"), &vocab)?];
    for (name, m) in [("ngram_fwd", &ng_fwd), ("ngram_bwd", &ng_bwd)] {
        let p = dir.join(format!("{}.json", name));
        m.save(std::io::BufWriter::new(create(&p)?))?;
        outputs.push(p);
        let p = dir.join(format!("{}.arpa", name));
        m.write_arpa(std::io::BufWriter::new(create(&p)?))?;
        outputs.push(p);
    }
    for (name, t) in &rnn {
        let p = dir.join(format!("rnn_{}.json", name));
        t.model.save(std::io::BufWriter::new(create(&p)?))?;
        outputs.push(p);
    }
    outputs.push(write_json(dir.join("report.json"), &report)?);
    outputs.push(write_text(dir.join(REPORT_FILE), &report.render())?);
    write_manifest(&ctx.work, LM, config_hash(&(ctx.cfg.seed, l)), chain, inputs, &outputs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// rescore
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitWers {
    pub am_only: f64,
    pub ngram: f64,
    pub full: f64,
    pub oracle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRescore {
    pub ngram_weights: ScoreWeights,
    pub full_weights: ScoreWeights,
    pub wer: BTreeMap<String, SplitWers>,
    /// Eval utterances whose oracle WER exceeds the rescored 1-best WER.
    pub oracle_violations: usize,
    pub eval_utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoreReport {
    pub systems: BTreeMap<String, SystemRescore>,
}

impl RescoreReport {
    pub fn render(&self) -> String {
        let mut s = format!("{:<8} {:<6} {:>8} {:>8} {:>8} {:>8}\n", "system", "split", "am", "+ngram", "+neural", "oracle");
        for (id, r) in &self.systems {
            for (split, w) in &r.wer {
                let _ = writeln!(s, "{:<8} {:<6} {:>8.2} {:>8.2} {:>8.2} {:>8.2}", id, split, w.am_only, w.ngram, w.full, w.oracle);
            }
        }
        s
    }
}

/// Corpus WER (percent) when each utterance takes its best hypothesis.
fn oracle_corpus_wer(pairs: &[(NBestList, Vec<String>)], score: &ScoreConfig) -> Result<f64> {
    let mut errors = 0;
    let mut words = 0;
    for (l, r) in pairs {
        let mut best = u64::MAX;
        let mut n = 0;
        for h in &l.hypotheses {
            let rep = score_utterance(r, &h.words, score)?.1;
            best = best.min(rep.counts.errors());
            n = rep.counts.ref_words;
        }
        errors += best;
        words += n;
    }
    Ok(100.0 * errors as f64 / words.max(1) as f64)
}

fn pair_with_refs(lists: Vec<NBestList>, refs: &BTreeMap<String, Vec<String>>) -> Result<Vec<(NBestList, Vec<String>)>> {
    lists
        .into_iter()
        .map(|l| {
            let r = refs.get(&l.utt_id).ok_or_else(|| PipelineError::Format(format!("no reference for {}", l.utt_id)))?.clone();
            Ok((l, r))
        })
        .collect()
}

fn rescore(ctx: &Ctx) -> Result<()> {
    let ids = system_ids(ctx.cfg.world.systems);
    let mut world_files: Vec<PathBuf> = SCORED_SPLITS.iter().map(|s| ctx.path(WORLD, &format!("{}/text", s))).collect();
    for id in &ids {
        for s in SCORED_SPLITS {
            world_files.push(ctx.path(WORLD, &format!("nbest/{}.{}.jsonl", id, s)));
        }
    }
    let mut lm_files: Vec<PathBuf> = ["ngram_fwd.json", "ngram_bwd.json"].iter().map(|f| ctx.path(LM, f)).collect();
    lm_files.extend(RNN_MODELS.iter().map(|(n, _, _)| ctx.path(LM, &format!("rnn_{}.json", n))));
    let mut files = world_files.clone();
    files.extend(lm_files.iter().cloned());
    let (inputs, chain) = verify_inputs(&ctx.work, &[WORLD, LM], &files)?;

    let ng_fwd = BackoffNgram::load(open(&lm_files[0])?)?;
    let ng_bwd = BackoffNgram::load(open(&lm_files[1])?)?;
    let rnn: BTreeMap<&str, ToyRecurrentLM> = RNN_MODELS
        .iter()
        .zip(&lm_files[2..])
        .map(|((n, _, _), p)| Ok((*n, ToyRecurrentLM::load(open(p)?)?)))
        .collect::<Result<_>>()?;
    let spec = InterpolationSpec::new(ctx.cfg.lm.interpolation.clone())?;
    let mix_fwd = InterpolatedLm::new(vec![&rnn["word_fwd"], &rnn["ltr_fwd"], &ng_fwd], spec.clone())?;
    let mix_bwd = InterpolatedLm::new(vec![&rnn["word_bwd"], &rnn["ltr_bwd"], &ng_bwd], spec)?;
    let neural_vocab = rnn["word_fwd"].vocab().clone();

    let refs: BTreeMap<&str, BTreeMap<String, Vec<String>>> =
        SCORED_SPLITS.iter().zip(&world_files).map(|(s, p)| Ok((*s, read_refs(p)?))).collect::<Result<_>>()?;
    let mut lists: BTreeMap<(String, &str), Vec<NBestList>> = BTreeMap::new();
    for id in &ids {
        for s in SCORED_SPLITS {
            let mut ls = read_nbest_jsonl(open(&ctx.path(WORLD, &format!("nbest/{}.{}.jsonl", id, s)))?)?;
            for l in &mut ls {
                l.truncate(ctx.cfg.rescore.nbest_depth);
            }
            lists.insert((id.clone(), s), ls);
        }
    }
    let unique: BTreeSet<Vec<String>> =
        lists.values().flatten().flat_map(|l| l.hypotheses.iter().map(|h| h.words.clone())).collect();
    let features: BTreeMap<Vec<String>, BTreeMap<String, f64>> = unique
        .into_par_iter()
        .map(|w| {
            let f = lm_features(&w, &ng_fwd, &mix_fwd, &mix_bwd, &neural_vocab);
            (w, f)
        })
        .collect();
    for ls in lists.values_mut() {
        for l in ls.iter_mut() {
            for h in &mut l.hypotheses {
                h.features.extend(features[&h.words].iter().map(|(k, v)| (k.clone(), *v)));
            }
        }
    }

    let score = ctx.score_config();
    let ocfg = OptimizeConfig { sweeps: ctx.cfg.rescore.sweeps, score: score.clone(), ..Default::default() };
    let am_only = ScoreWeights::from_pairs(&[(AM_SCORE, 1.0), (NGRAM_LM, 0.0), (WORD_COUNT, 0.0)]);
    let dir = ctx.fresh_dir(RESCORE)?;
    let mut outputs = Vec::new();
    let mut report = RescoreReport { systems: BTreeMap::new() };
    for id in &ids {
        let pairs: BTreeMap<&str, Vec<(NBestList, Vec<String>)>> = SCORED_SPLITS
            .iter()
            .map(|&s| Ok((s, pair_with_refs(lists[&(id.clone(), s)].clone(), &refs[s])?)))
            .collect::<Result<_>>()?;
        let ng = optimize_weights(&pairs["dev"], &am_only, &ocfg)?;
        let mut init = ng.weights.clone();
        for f in [NEURAL_FWD, NEURAL_BWD, OOV_COUNT] {
            init.set(f, 0.0);
        }
        let full = optimize_weights(&pairs["dev"], &init, &ocfg)?;
        log::info!("{}: dev WER am {:.2} ngram {:.2} full {:.2}", id, ng.initial_wer, ng.wer, full.wer);

        let mut wer = BTreeMap::new();
        for (&s, p) in &pairs {
            wer.insert(
                s.to_string(),
                SplitWers {
                    am_only: dev_wer(p, &am_only, &score)?,
                    ngram: dev_wer(p, &ng.weights, &score)?,
                    full: dev_wer(p, &full.weights, &score)?,
                    oracle: oracle_corpus_wer(p, &score)?,
                },
            );
        }
        let eval_lists: Vec<NBestList> = pairs["eval"].iter().map(|p| p.0.clone()).collect();
        let best = rescore_lists(&eval_lists, &full.weights)?;
        let mut violations = 0;
        for ((l, r), (_, hyp)) in pairs["eval"].iter().zip(&best) {
            if convasr_core::rescore::oracle_wer(l, r, &score)? > convasr_core::rescore::hypothesis_wer(r, hyp, &score)? {
                violations += 1;
            }
        }
        report.systems.insert(
            id.clone(),
            SystemRescore {
                ngram_weights: ng.weights.clone(),
                full_weights: full.weights.clone(),
                wer,
                oracle_violations: violations,
                eval_utterances: eval_lists.len(),
            },
        );

        outputs.push(write_json(dir.join(format!("{}.weights.json", id)), &full.weights)?);
        outputs.push(write_json(dir.join(format!("{}.ngram_weights.json", id)), &ng.weights)?);
        for s in SCORED_SPLITS {
            let ls: Vec<NBestList> = pairs[s].iter().map(|p| p.0.clone()).collect();
            let p = dir.join(format!("{}.{}.jsonl", id, s));
            write_nbest_jsonl(std::io::BufWriter::new(create(&p)?), &ls)?;
            outputs.push(p);
            let hyps: BTreeMap<String, Vec<String>> = rescore_lists(&ls, &full.weights)?.into_iter().collect();
            outputs.push(write_hyps(dir.join(format!("{}.{}.hyp", id, s)), &hyps)?);
        }
    }
    outputs.push(write_json(dir.join("report.json"), &report)?);
    outputs.push(write_text(dir.join(REPORT_FILE), &report.render())?);
    let hash = config_hash(&(ctx.cfg.seed, &ctx.cfg.rescore, &ctx.cfg.lm.interpolation, &ctx.cfg.score));
    write_manifest(&ctx.work, RESCORE, hash, chain, inputs, &outputs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// cn
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnReport {
    /// System to split to consensus-decoded WER.
    pub wer: BTreeMap<String, BTreeMap<String, f64>>,
}

fn cn(ctx: &Ctx) -> Result<()> {
    let ids = system_ids(ctx.cfg.world.systems);
    let mut files: Vec<PathBuf> = SCORED_SPLITS.iter().map(|s| ctx.path(WORLD, &format!("{}/text", s))).collect();
    for id in &ids {
        files.push(ctx.path(RESCORE, &format!("{}.weights.json", id)));
        for s in SCORED_SPLITS {
            files.push(ctx.path(RESCORE, &format!("{}.{}.jsonl", id, s)));
        }
    }
    let (inputs, chain) = verify_inputs(&ctx.work, &[WORLD, RESCORE], &files)?;
    let score = ctx.score_config();
    let costs = CnCosts::default();
    let dir = ctx.fresh_dir(CN)?;
    let mut outputs = Vec::new();
    let mut report = CnReport { wer: BTreeMap::new() };
    for id in &ids {
        let weights = ScoreWeights::read_json(open(&ctx.path(RESCORE, &format!("{}.weights.json", id)))?)?;
        for (s, ref_path) in SCORED_SPLITS.iter().zip(&files) {
            let lists = read_nbest_jsonl(open(&ctx.path(RESCORE, &format!("{}.{}.jsonl", id, s)))?)?;
            let cns = lists
                .par_iter()
                .map(|l| build_confusion_network(l, &weights, ctx.cfg.combine.posterior_scale, &costs))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let by_utt: BTreeMap<String, ConfusionNetwork> = cns.iter().map(|c| (c.utt_id.clone(), c.clone())).collect();
            let w = wer_of_networks(&by_utt, &read_refs(ref_path)?, &score)?;
            report.wer.entry(id.clone()).or_default().insert(s.to_string(), w);
            let p = dir.join(format!("{}.{}.jsonl", id, s));
            write_cn_jsonl(std::io::BufWriter::new(create(&p)?), &cns)?;
            outputs.push(p);
        }
    }
    outputs.push(write_json(dir.join("report.json"), &report)?);
    let hash = config_hash(&(ctx.cfg.seed, ctx.cfg.combine.posterior_scale, &ctx.cfg.score));
    write_manifest(&ctx.work, CN, hash, chain, inputs, &outputs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// combine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub system: String,
    pub relative_weight: f64,
    pub weights: Vec<f64>,
    pub dev_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub groups: Vec<Vec<String>>,
    pub selected: Vec<String>,
    pub weights: Vec<f64>,
    /// Dev WER of the first system and after each accepted round.
    pub dev_trace: Vec<f64>,
    pub rounds: Vec<RoundRecord>,
    /// Eval WER of each merged group alone, then of the combination.
    pub eval_wer: BTreeMap<String, f64>,
    pub combined_eval_wer: f64,
}

fn load_system(ctx: &Ctx, id: &str, split: &str) -> Result<System> {
    let cns = read_cn_jsonl(open(&ctx.path(CN, &format!("{}.{}.jsonl", id, split)))?)?;
    Ok(System { id: id.to_string(), cns: cns.into_iter().map(|c| (c.utt_id.clone(), c)).collect() })
}

fn combine(ctx: &Ctx) -> Result<()> {
    let groups = ctx.cfg.combination_groups();
    let mut files: Vec<PathBuf> = SCORED_SPLITS.iter().map(|s| ctx.path(WORLD, &format!("{}/text", s))).collect();
    for id in system_ids(ctx.cfg.world.systems) {
        for s in SCORED_SPLITS {
            files.push(ctx.path(CN, &format!("{}.{}.jsonl", id, s)));
        }
    }
    let (inputs, chain) = verify_inputs(&ctx.work, &[WORLD, CN], &files)?;
    let refs_dev = read_refs(&files[0])?;
    let refs_eval = read_refs(&files[1])?;
    let c = &ctx.cfg.combine;
    let gcfg = GreedyConfig {
        ladder: c.ladder.clone(),
        search: match c.search {
            SearchKind::Ladder => WeightSearch::Ladder,
            SearchKind::Em => WeightSearch::Em { smooth: c.smooth },
        },
        score: ctx.score_config(),
    };
    let load_groups = |split: &str| -> Result<Vec<Vec<System>>> {
        groups.iter().map(|g| g.iter().map(|id| load_system(ctx, id, split)).collect()).collect()
    };
    let (res, dev_cns) = two_stage_combine(&load_groups("dev")?, &refs_dev, &gcfg)?;
    let eval_systems = load_groups("eval")?
        .iter()
        .map(|g| combine_group(g, &g.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join("+")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let eval_set = SystemSet { systems: eval_systems, refs: refs_eval.clone() };
    eval_set.validate()?;
    let eval_cns = eval_set.combine(&res.selected, &res.weights)?;
    let mut eval_wer = BTreeMap::new();
    for s in &eval_set.systems {
        eval_wer.insert(s.id.clone(), wer_of_networks(&s.cns, &refs_eval, &gcfg.score)?);
    }
    let combined_eval_wer = wer_of_networks(&eval_cns, &refs_eval, &gcfg.score)?;
    log::info!("combination of {:?}: eval WER {:.2}", res.ids, combined_eval_wer);

    let selection = Selection {
        groups: groups.clone(),
        selected: res.ids.clone(),
        weights: res.weights.0.clone(),
        dev_trace: res.trace.clone(),
        rounds: res
            .rounds
            .iter()
            .map(|r| RoundRecord { system: r.system.clone(), relative_weight: r.relative_weight, weights: r.weights.0.clone(), dev_wer: r.wer })
            .collect(),
        eval_wer,
        combined_eval_wer,
    };
    let dir = ctx.fresh_dir(COMBINE)?;
    let mut outputs = Vec::new();
    for (s, cns) in [("dev", &dev_cns), ("eval", &eval_cns)] {
        let p = dir.join(format!("{}.jsonl", s));
        write_cn_jsonl(std::io::BufWriter::new(create(&p)?), &cns.values().cloned().collect::<Vec<_>>())?;
        outputs.push(p);
        let hyps: BTreeMap<String, Vec<String>> = cns.iter().map(|(u, c)| (u.clone(), cn_decode(c))).collect();
        outputs.push(write_hyps(dir.join(format!("{}.hyp", s)), &hyps)?);
    }
    outputs.push(write_json(dir.join("selection.json"), &selection)?);
    let mut text = format!("greedy selection on dev\n{}\neval WER\n", res);
    for (id, w) in &selection.eval_wer {
        let _ = writeln!(text, "  {:<20} {:>8.2}", id, w);
    }
    let _ = writeln!(text, "  {:<20} {:>8.2}", "combined", combined_eval_wer);
    outputs.push(write_text(dir.join(REPORT_FILE), &text)?);
    write_manifest(&ctx.work, COMBINE, config_hash(&(ctx.cfg.seed, c, &ctx.cfg.score)), chain, inputs, &outputs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

pub const COMBINED_LABEL: &str = "combined";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub split: String,
    pub rates: RateTable,
    pub tables: BTreeMap<String, ErrorTables>,
}

fn score(ctx: &Ctx) -> Result<()> {
    let refs_path = ctx.path(WORLD, "eval/text");
    let mut columns: Vec<(String, PathBuf)> =
        system_ids(ctx.cfg.world.systems).into_iter().map(|id| (id.clone(), ctx.path(RESCORE, &format!("{}.eval.hyp", id)))).collect();
    let mut upstream = vec![WORLD, RESCORE];
    if ctx.cfg.stages.combine {
        columns.push((COMBINED_LABEL.to_string(), ctx.path(COMBINE, "eval.hyp")));
        upstream.push(COMBINE);
    }
    let mut files = vec![refs_path.clone()];
    files.extend(columns.iter().map(|c| c.1.clone()));
    let (inputs, chain) = verify_inputs(&ctx.work, &upstream, &files)?;
    let refs = read_refs(&refs_path)?;
    let score = ctx.score_config();
    let k = ctx.cfg.score.table_rows;
    let mut reports = Vec::new();
    let mut tables = BTreeMap::new();
    for (label, p) in &columns {
        let (aligns, rep) = score_corpus(&refs, &read_refs(p)?, &score)?;
        let a: Vec<_> = aligns.into_iter().map(|x| x.1).collect();
        tables.insert(label.clone(), error_tables(&a, k)?);
        reports.push((label.clone(), rep));
    }
    let rate_cols: Vec<(String, &_)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    let rates = RateTable::new(&rate_cols);
    let labelled: Vec<(String, &ErrorTables)> = columns.iter().map(|(l, _)| (l.clone(), &tables[l])).collect();
    let mut text = format!("eval error rates (%)\n{}", rates);
    for (title, kind) in [("substitutions", TableKind::Substitutions), ("deletions", TableKind::Deletions), ("insertions", TableKind::Insertions)] {
        let _ = write!(text, "\ntop {} {}\n{}", k, title, ComparisonTable::new(kind, &labelled));
    }
    let report = ScoreReport { split: "eval".into(), rates, tables };
    let dir = ctx.fresh_dir(SCORE)?;
    let outputs = vec![write_text(dir.join(REPORT_FILE), &text)?, write_json(dir.join("report.json"), &report)?];
    write_manifest(&ctx.work, SCORE, config_hash(&(ctx.cfg.seed, &ctx.cfg.score, ctx.cfg.stages.combine)), chain, inputs, &outputs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Collects the stage reports present in the work dir into one text file
/// and returns its contents.
pub fn write_report(work: &Path) -> Result<String> {
    let mut out = String::new();
    let mut section = |title: &str, body: String| {
        let _ = write!(out, "== {} ==\n{}\n", title, body.trim_end());
        out.push('\n');
    };
    let am = work.join(AM).join("report.json");
    if am.exists() {
        let r: AmReport = serde_json::from_reader(open(&am)?)?;
        let mut s = format!("denominator graph: {} states, {} arcs\n", r.graph_states, r.graph_arcs);
        for (name, m) in [("smoothed", &r.smoothed), ("unsmoothed", &r.unsmoothed)] {
            let _ = writeln!(
                s,
                "{:<11} weight {:.2}  dev frame accuracy {:.4}  neighbor correlation {:.4}  final loss {:.4}",
                name,
                m.smoothing_weight,
                m.dev_frame_accuracy,
                m.neighbor_correlation,
                m.loss.last().total()
            );
        }
        section("acoustic model", s);
    }
    for (title, stage) in [("language models", LM), ("rescoring (WER %)", RESCORE), ("system combination", COMBINE), ("scoring", SCORE)] {
        let p = work.join(stage).join(REPORT_FILE);
        if p.exists() {
            section(title, std::fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?);
        }
    }
    if out.is_empty() {
        return Err(PipelineError::Config(format!("no stage reports under {}", work.display())));
    }
    let p = work.join(REPORT_FILE);
    std::fs::write(&p, &out).map_err(|e| PipelineError::io(&p, e))?;
    Ok(out)
}
