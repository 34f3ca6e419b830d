//! Seeded synthetic world: lexicon, grammars, Gaussian emission model,
//! speaker offsets, aligned feature streams and per-system N-best lists.
//!
//! System outputs come from forced-alignment scores under noisy copies of
//! the true emission log-likelihoods. The noise of system `k` is
//! `sqrt(rho) * shared + sqrt(1 - rho) * own_k`, so `rho = 1` gives every
//! system the same lists.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use convasr_core::graph::{write_alignments, PhoneId, SenoneAlignment, SenoneId, SenoneTable, STATES_PER_PHONE};
use convasr_core::rescore::{write_nbest_jsonl, Hypothesis, NBestList, AM_SCORE};
use convasr_core::score::{align, write_transcripts, EditCosts, EditOp};

use crate::config::{system_ids, WorldConfig};
use crate::error::{PipelineError, Result};

pub const SPLITS: [&str; 3] = ["train", "dev", "eval"];
pub const SCORED_SPLITS: [&str; 2] = ["dev", "eval"];
const PHONE_SYMBOLS: &str = "aeioukstmnlrpbdgfvzhjwycxq";
const MAX_SENTENCE: usize = 10;
const STOP_PROB: f64 = 0.25;
const SUCCESSORS: usize = 5;
const MAX_SITES: usize = 5;
const STRAY_EDIT_RATE: f64 = 0.3;

enum Site {
    Sub(String),
    Del,
    Ins(String),
}

/// Independent generator for a named purpose, derived from the run seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let d = Sha256::digest(format!("{}/{}", seed, name).as_bytes());
    ChaCha8Rng::from_seed(d.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub start: Vec<f64>,
    pub successors: Vec<Vec<(usize, f64)>>,
}

impl Grammar {
    fn random(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let mut rank: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            rank.swap(i, rng.random_range(0..=i));
        }
        let start = rank.iter().map(|&r| 1.0 / (r + 1) as f64).collect();
        let successors = (0..n)
            .map(|_| {
                let mut picked = BTreeSet::new();
                while picked.len() < SUCCESSORS.min(n) {
                    picked.insert(rng.random_range(0..n));
                }
                picked.into_iter().map(|s| (s, rng.sample::<f64, _>(Exp1) + 0.05)).collect()
            })
            .collect();
        Self { start, successors }
    }

    fn next(&self, rng: &mut ChaCha8Rng, w: usize, n: usize) -> usize {
        if rng.random::<f64>() < 0.9 {
            let s = &self.successors[w];
            let d = WeightedIndex::new(s.iter().map(|x| x.1)).expect("positive weights");
            s[d.sample(rng)].0
        } else {
            rng.random_range(0..n)
        }
    }

    /// Sentence as word indices. With `mix`, each transition follows that
    /// grammar instead with probability one half.
    fn sentence(&self, rng: &mut ChaCha8Rng, mix: Option<&Grammar>) -> Vec<usize> {
        let n = self.start.len();
        let d = WeightedIndex::new(&self.start).expect("positive weights");
        let mut s = vec![d.sample(rng)];
        while s.len() < MAX_SENTENCE && (s.len() < 2 || rng.random::<f64>() >= STOP_PROB) {
            let w = s[s.len() - 1];
            let g = match mix {
                Some(m) if rng.random::<f64>() < 0.5 => m,
                _ => self,
            };
            s.push(g.next(rng, w, n));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub side: String,
    pub words: Vec<String>,
    pub senones: Vec<SenoneId>,
    pub features: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionModel {
    pub std: f64,
    /// Senone means, one row per senone.
    pub means: Array2<f64>,
    /// Maps a speaker vector to a feature offset.
    pub speaker_proj: Array2<f64>,
}

impl EmissionModel {
    fn offset(&self, v: &[f64]) -> Array1<f64> {
        if v.is_empty() {
            return Array1::zeros(self.means.ncols());
        }
        self.speaker_proj.dot(&Array1::from(v.to_vec()))
    }

    /// Frame-by-senone Gaussian log-likelihoods, up to a constant.
    pub fn loglikes(&self, features: &Array2<f64>, speaker: &[f64]) -> Array2<f64> {
        let off = self.offset(speaker);
        let (t_len, s_len) = (features.nrows(), self.means.nrows());
        let denom = 2.0 * self.std * self.std;
        Array2::from_shape_fn((t_len, s_len), |(t, s)| {
            let mut d = 0.0;
            for k in 0..features.ncols() {
                let x = features[[t, k]] - off[k] - self.means[[s, k]];
                d += x * x;
            }
            -d / denom
        })
    }
}

/// Best single-path log-likelihood of a left-to-right senone sequence
/// where each senone covers at least one frame.
pub fn forced_align_score(ll: &Array2<f64>, seq: &[usize]) -> Option<f64> {
    let (t_len, s_len) = (ll.nrows(), seq.len());
    if s_len == 0 || s_len > t_len {
        return None;
    }
    let mut prev = vec![f64::NEG_INFINITY; s_len];
    prev[0] = ll[[0, seq[0]]];
    for t in 1..t_len {
        let mut cur = vec![f64::NEG_INFINITY; s_len];
        for j in 0..s_len.min(t + 1) {
            let adv = if j > 0 { prev[j - 1] } else { f64::NEG_INFINITY };
            let b = prev[j].max(adv);
            if b > f64::NEG_INFINITY {
                cur[j] = b + ll[[t, seq[j]]];
            }
        }
        prev = cur;
    }
    Some(prev[s_len - 1]).filter(|x| x.is_finite())
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub phones: Vec<String>,
    pub words: Vec<String>,
    /// Phone indices of each word, parallel to `words`.
    pub prons: Vec<Vec<usize>>,
    pub table: SenoneTable,
    pub emission: EmissionModel,
    pub grammar: Grammar,
    pub speakers: BTreeMap<String, Vec<f64>>,
    pub splits: BTreeMap<String, Vec<Utterance>>,
    /// `in_domain`, `out_domain` and `valid` sentences.
    pub lm_text: BTreeMap<String, Vec<Vec<String>>>,
    /// System id to split to lists.
    pub nbest: BTreeMap<String, BTreeMap<String, Vec<NBestList>>>,
}

fn phone_distance(a: &[usize], b: &[usize]) -> usize {
    let mut d: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut prev = d[0];
        d[0] = i;
        for j in 1..=b.len() {
            let cur = d[j];
            d[j] = (prev + (a[i - 1] != b[j - 1]) as usize).min(d[j] + 1).min(d[j - 1] + 1);
            prev = cur;
        }
    }
    d[b.len()]
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

impl World {
    pub fn senone_sequence(&self, words: &[String], index: &BTreeMap<&str, usize>) -> Vec<usize> {
        words
            .iter()
            .flat_map(|w| self.prons[index[w.as_str()]].iter().flat_map(|&p| (0..STATES_PER_PHONE).map(move |k| p * STATES_PER_PHONE + k)))
            .collect()
    }

    pub fn generate(seed: u64, config: &WorldConfig) -> Self {
        let c = config;
        let phones: Vec<String> = PHONE_SYMBOLS.chars().take(c.phones).map(String::from).collect();
        let mut rng = substream(seed, "lexicon");
        let mut seen = BTreeSet::new();
        let mut words = Vec::new();
        let mut prons = Vec::new();
        while words.len() < c.vocab_size {
            let len = rng.random_range(2..=4);
            let p: Vec<usize> = (0..len).map(|_| rng.random_range(0..c.phones)).collect();
            let spelling: String = p.iter().map(|&i| phones[i].as_str()).collect();
            if seen.insert(spelling.clone()) {
                words.push(spelling);
                prons.push(p);
            }
        }
        let table = SenoneTable::from_pairs(
            (0..c.phones).flat_map(|p| (0..STATES_PER_PHONE).map(move |k| (SenoneId((p * STATES_PER_PHONE + k) as u32), PhoneId(p as u32)))),
        );
        let n_sen = c.phones * STATES_PER_PHONE;
        let mut rng = substream(seed, "emission");
        let emission = EmissionModel {
            std: c.emission_std,
            means: gaussian(&mut rng, n_sen, c.feature_dim, 1.0),
            speaker_proj: gaussian(&mut rng, c.feature_dim, c.speaker_dim, 0.5),
        };
        let mut rng = substream(seed, "grammar");
        let grammar = Grammar::random(&mut rng, c.vocab_size);
        let ood = Grammar::random(&mut rng, c.vocab_size);

        let to_words = |s: Vec<usize>| -> Vec<String> { s.into_iter().map(|i| words[i].clone()).collect() };
        let mut lm_text = BTreeMap::new();
        let mut rng = substream(seed, "lm/in_domain");
        lm_text.insert("in_domain".to_string(), (0..c.lm_in_domain_sentences).map(|_| to_words(grammar.sentence(&mut rng, None))).collect());
        let mut rng = substream(seed, "lm/out_domain");
        lm_text.insert("out_domain".to_string(), (0..c.lm_out_domain_sentences).map(|_| to_words(ood.sentence(&mut rng, Some(&grammar)))).collect());
        let mut rng = substream(seed, "lm/valid");
        lm_text.insert("valid".to_string(), (0..c.lm_valid_sentences).map(|_| to_words(grammar.sentence(&mut rng, None))).collect());

        let mut world = World {
            seed,
            config: c.clone(),
            phones,
            words: words.clone(),
            prons,
            table,
            emission,
            grammar,
            speakers: BTreeMap::new(),
            splits: BTreeMap::new(),
            lm_text,
            nbest: BTreeMap::new(),
        };
        let index: BTreeMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();

        for split in SPLITS {
            let (count, sides) = match split {
                "train" => (c.train_utterances, 2 * c.sides_per_split),
                "dev" => (c.dev_utterances, c.sides_per_split),
                _ => (c.eval_utterances, c.sides_per_split),
            };
            let mut rng = substream(seed, &format!("speakers/{}", split));
            for k in 0..sides {
                let v: Vec<f64> = (0..c.speaker_dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
                world.speakers.insert(format!("{}-side{}", split, k), v);
            }
            let mut rng = substream(seed, &format!("utterances/{}", split));
            let noise = Normal::new(0.0, c.emission_std).expect("valid std");
            let mut utts = Vec::with_capacity(count);
            for i in 0..count {
                let ws = to_words(world.grammar.sentence(&mut rng, None));
                let side = format!("{}-side{}", split, i % sides);
                let mut senones = Vec::new();
                for s in world.senone_sequence(&ws, &index) {
                    for _ in 0..rng.random_range(1..=3) {
                        senones.push(SenoneId(s as u32));
                    }
                }
                let off = world.emission.offset(&world.speakers[&side]);
                let features = Array2::from_shape_fn((senones.len(), c.feature_dim), |(t, k)| {
                    world.emission.means[[senones[t].index(), k]] + off[k]
                });
                let features = features.mapv(|x| x + noise.sample(&mut rng));
                utts.push(Utterance { utt_id: format!("{}{:04}", split, i), side, words: ws, senones, features });
            }
            world.splits.insert(split.to_string(), utts);
        }
        world.generate_nbest(&index);
        world
    }

    fn confusable(&self) -> Vec<Vec<usize>> {
        (0..self.words.len())
            .map(|i| {
                let mut others: Vec<(usize, usize)> =
                    (0..self.words.len()).filter(|&j| j != i).map(|j| (phone_distance(&self.prons[i], &self.prons[j]), j)).collect();
                others.sort();
                others.into_iter().take(4).map(|x| x.1).collect()
            })
            .collect()
    }

    /// Distinct proposals for one utterance, shaped like a lattice: a few
    /// uncertain sites each carry one competing alternative (a confusable
    /// substitution, a deletion or an insertion) that a proposal takes
    /// with probability one half, and some proposals get one stray edit
    /// away from the sites.
    /// The reference itself is proposed with probability `reference_rate`.
    fn candidates(&self, rng: &mut ChaCha8Rng, reference: &[String], confusable: &[Vec<usize>], index: &BTreeMap<&str, usize>) -> Vec<Vec<String>> {
        let n = reference.len();
        let mut positions: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            positions.swap(i, rng.random_range(0..=i));
        }
        let mut sites: BTreeMap<usize, Site> = BTreeMap::new();
        for &pos in positions.iter().take((1 + n / 2).min(MAX_SITES)) {
            let x: f64 = rng.random();
            let site = if x < 0.6 {
                let alts = &confusable[index[reference[pos].as_str()]];
                Site::Sub(self.words[alts[rng.random_range(0..alts.len())]].clone())
            } else if x < 0.8 && n > 1 {
                Site::Del
            } else {
                Site::Ins(self.words[rng.random_range(0..self.words.len())].clone())
            };
            sites.insert(pos, site);
        }
        let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
        seen.insert(reference.to_vec());
        let mut out = Vec::new();
        if rng.random::<f64>() < self.config.reference_rate {
            out.push(reference.to_vec());
        }
        let quiet: Vec<usize> = (0..n).filter(|i| !sites.contains_key(i)).collect();
        let mut attempts = 0;
        while out.len() < self.config.pool_size && attempts < 20 * self.config.pool_size {
            attempts += 1;
            // stray edits stay off the sites so each site is a two-way choice
            let stray = if !quiet.is_empty() && rng.random::<f64>() < STRAY_EDIT_RATE {
                Some(quiet[rng.random_range(0..quiet.len())])
            } else {
                None
            };
            let mut h = Vec::with_capacity(n + 1);
            for (i, w) in reference.iter().enumerate() {
                if stray == Some(i) {
                    let x: f64 = rng.random();
                    if x < 0.6 {
                        let alts = &confusable[index[w.as_str()]];
                        h.push(self.words[alts[rng.random_range(0..alts.len())]].clone());
                    } else if x < 0.8 {
                        continue;
                    } else {
                        h.push(self.words[rng.random_range(0..self.words.len())].clone());
                        h.push(w.clone());
                    }
                    continue;
                }
                match sites.get(&i) {
                    Some(site) if rng.random::<f64>() < 0.5 => match site {
                        Site::Sub(alt) => h.push(alt.clone()),
                        Site::Del => {}
                        Site::Ins(extra) => {
                            h.push(extra.clone());
                            h.push(w.clone());
                        }
                    },
                    _ => h.push(w.clone()),
                }
            }
            if !h.is_empty() && seen.insert(h.clone()) {
                out.push(h);
            }
        }
        if out.is_empty() {
            out.push(reference.to_vec());
        }
        out
    }

    fn generate_nbest(&mut self, index: &BTreeMap<&str, usize>) {
        let c = self.config.clone();
        let confusable = self.confusable();
        let ids = system_ids(c.systems);
        let rho = c.error_correlation;
        let (shared_w, own_w) = (rho.sqrt(), (1.0 - rho).sqrt());
        for split in SCORED_SPLITS {
            let mut cand_rng = substream(self.seed, &format!("candidates/{}", split));
            let mut shared_rng = substream(self.seed, &format!("system-noise/{}/shared", split));
            let mut own_rngs: Vec<ChaCha8Rng> = ids.iter().map(|s| substream(self.seed, &format!("system-noise/{}/{}", split, s))).collect();
            let mut lists: Vec<Vec<NBestList>> = vec![Vec::new(); ids.len()];
            for u in &self.splits[split] {
                let pool = self.candidates(&mut cand_rng, &u.words, &confusable, index);
                let seqs: Vec<Vec<usize>> = pool.iter().map(|h| self.senone_sequence(h, index)).collect();
                let base = self.emission.loglikes(&u.features, &self.speakers[&u.side]);
                let shared = gaussian(&mut shared_rng, base.nrows(), base.ncols(), c.system_noise);
                for (k, id) in ids.iter().enumerate() {
                    let own = gaussian(&mut own_rngs[k], base.nrows(), base.ncols(), c.system_noise);
                    let ll = &base + &(shared.mapv(|x| shared_w * x) + own.mapv(|x| own_w * x));
                    let mut scored: Vec<(f64, usize)> =
                        seqs.iter().enumerate().filter_map(|(i, s)| forced_align_score(&ll, s).map(|v| (v, i))).collect();
                    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                    scored.truncate(c.candidates);
                    let hyps = scored.into_iter().map(|(v, i)| Hypothesis::new(pool[i].clone()).with_feature(AM_SCORE, v)).collect();
                    lists[k].push(NBestList { utt_id: u.utt_id.clone(), source_system: id.clone(), hypotheses: hyps });
                }
            }
            for (id, l) in ids.iter().zip(lists) {
                self.nbest.entry(id.clone()).or_default().insert(split.to_string(), l);
            }
        }
    }

    pub fn references(&self, split: &str) -> BTreeMap<String, Vec<String>> {
        self.splits[split].iter().map(|u| (u.utt_id.clone(), u.words.clone())).collect()
    }

    /// Writes the world under `dir` and returns the files written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut file = |rel: &str, f: &mut dyn FnMut(&mut dyn Write) -> Result<()>| -> Result<()> {
            let p = dir.join(rel);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
            }
            let fh = std::fs::File::create(&p).map_err(|e| PipelineError::io(&p, e))?;
            let mut w = BufWriter::new(fh);
            f(&mut w)?;
            w.flush().map_err(|e| PipelineError::io(&p, e))?;
            written.push(p);
            Ok(())
        };
        let io = |e: std::io::Error| PipelineError::io("", e);

        let info = WorldInfo {
            seed: self.seed,
            config: self.config.clone(),
            phones: self.phones.clone(),
            lexicon: self.words.iter().zip(&self.prons).map(|(w, p)| (w.clone(), p.iter().map(|&i| self.phones[i].clone()).collect())).collect(),
            emission: self.emission.clone(),
        };
        file("world.json", &mut |w| Ok(serde_json::to_writer_pretty(w, &info)?))?;
        file("senones.txt", &mut |w| self.table.write(&mut { w }).map_err(io))?;
        file("lexicon.txt", &mut |w| {
            for (word, pron) in &info.lexicon {
                writeln!(w, "{} {}", word, pron.join(" ")).map_err(io)?;
            }
            Ok(())
        })?;
        file("speakers.json", &mut |w| Ok(serde_json::to_writer_pretty(w, &self.speakers)?))?;
        for (split, utts) in &self.splits {
            file(&format!("{}/text", split), &mut |w| Ok(write_transcripts(w, &self.references(split))?))?;
            file(&format!("{}/align.txt", split), &mut |w| {
                let al: Vec<SenoneAlignment> = utts
                    .iter()
                    .map(|u| SenoneAlignment::new(u.utt_id.clone(), u.senones.clone(), &self.table))
                    .collect::<std::result::Result<_, _>>()?;
                write_alignments(&mut { w }, &al).map_err(io)
            })?;
            file(&format!("{}/feats.jsonl", split), &mut |w| {
                for u in utts {
                    let rec = FeatureRecord {
                        utt_id: u.utt_id.clone(),
                        side: u.side.clone(),
                        features: u.features.rows().into_iter().map(|r| r.to_vec()).collect(),
                    };
                    serde_json::to_writer(&mut *w, &rec)?;
                    writeln!(w).map_err(io)?;
                }
                Ok(())
            })?;
        }
        for (name, text) in &self.lm_text {
            file(&format!("lm/{}.txt", name), &mut |w| {
                for s in text {
                    writeln!(w, "{}", s.join(" ")).map_err(io)?;
                }
                Ok(())
            })?;
        }
        for (sys, by_split) in &self.nbest {
            for (split, lists) in by_split {
                file(&format!("nbest/{}.{}.jsonl", sys, split), &mut |w| Ok(write_nbest_jsonl(w, lists)?))?;
            }
        }
        Ok(written)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldInfo {
    pub seed: u64,
    pub config: WorldConfig,
    pub phones: Vec<String>,
    pub lexicon: BTreeMap<String, Vec<String>>,
    pub emission: EmissionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub utt_id: String,
    pub side: String,
    pub features: Vec<Vec<f64>>,
}

impl FeatureRecord {
    pub fn matrix(&self) -> Result<Array2<f64>> {
        let cols = self.features.first().map_or(0, Vec::len);
        if self.features.iter().any(|r| r.len() != cols) {
            return Err(PipelineError::Format(format!("{}: ragged feature rows", self.utt_id)));
        }
        Array2::from_shape_vec((self.features.len(), cols), self.features.concat())
            .map_err(|e| PipelineError::Format(e.to_string()))
    }
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let f = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Word-level error events of a 1-best output: reference positions that
/// were substituted or deleted, and insertions keyed by the following
/// reference position.
pub fn error_events(refs: &BTreeMap<String, Vec<String>>, hyps: &BTreeMap<String, Vec<String>>) -> BTreeSet<(String, usize, bool)> {
    let mut out = BTreeSet::new();
    for (u, r) in refs {
        let a = align(r, hyps.get(u).map(Vec::as_slice).unwrap_or(&[]), &EditCosts::default());
        let mut pos = 0;
        for p in &a.ops {
            match p.op {
                EditOp::Match => pos += 1,
                EditOp::Sub | EditOp::Del => {
                    out.insert((u.clone(), pos, false));
                    pos += 1;
                }
                EditOp::Ins => {
                    out.insert((u.clone(), pos, true));
                }
            }
        }
    }
    out
}

/// Jaccard overlap of two systems' error events.
pub fn error_overlap(refs: &BTreeMap<String, Vec<String>>, a: &BTreeMap<String, Vec<String>>, b: &BTreeMap<String, Vec<String>>) -> f64 {
    let (ea, eb) = (error_events(refs, a), error_events(refs, b));
    let union = ea.union(&eb).count();
    if union == 0 {
        return 0.0;
    }
    ea.intersection(&eb).count() as f64 / union as f64
}

/// First hypothesis of each list.
pub fn first_best(lists: &[NBestList]) -> BTreeMap<String, Vec<String>> {
    lists.iter().map(|l| (l.utt_id.clone(), l.hypotheses.first().map(|h| h.words.clone()).unwrap_or_default())).collect()
}
