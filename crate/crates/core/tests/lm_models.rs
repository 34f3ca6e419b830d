use std::collections::HashMap;

use convasr_core::lm::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sentences from a random sparse bigram grammar over `n_words` words.
fn grammar_corpus(seed: u64, n_sent: usize, n_words: usize) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let succ: Vec<Vec<usize>> = (0..n_words).map(|_| (0..3).map(|_| rng.random_range(0..n_words)).collect()).collect();
    let names: Vec<String> = (0..n_words).map(|i| format!("w{:02}", i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sent)
        .map(|_| {
            let len = rng.random_range(3..9);
            let mut w = rng.random_range(0..n_words);
            let mut s = vec![names[w].clone()];
            for _ in 1..len {
                w = if rng.random::<f64>() < 0.85 { succ[w][rng.random_range(0..3)] } else { rng.random_range(0..n_words) };
                s.push(names[w].clone());
            }
            s
        })
        .collect()
}

/// Minimal ARPA reader and backoff evaluator, independent of the model code.
struct Arpa {
    probs: HashMap<Vec<String>, f64>,
    bows: HashMap<Vec<String>, f64>,
    order: usize,
}

impl Arpa {
    fn parse(text: &str) -> Self {
        let mut probs = HashMap::new();
        let mut bows = HashMap::new();
        let mut order = 0;
        let mut section = 0;
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('\\') {
                if let Some(n) = rest.strip_suffix("-grams:") {
                    section = n.parse().unwrap();
                    order = order.max(section);
                } else {
                    section = 0;
                }
                continue;
            }
            if section == 0 || line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let words: Vec<String> = parts[1].split(' ').map(String::from).collect();
            assert_eq!(words.len(), section);
            probs.insert(words.clone(), parts[0].parse::<f64>().unwrap());
            if parts.len() > 2 {
                bows.insert(words, parts[2].parse::<f64>().unwrap());
            }
        }
        Self { probs, bows, order }
    }

    fn log10_prob(&self, hist: &[String], w: &str) -> f64 {
        let keep = (self.order - 1).min(hist.len());
        let h = &hist[hist.len() - keep..];
        let mut g = h.to_vec();
        g.push(w.to_string());
        if let Some(&p) = self.probs.get(&g) {
            return p;
        }
        let bow = self.bows.get(h).copied().unwrap_or(0.0);
        bow + self.log10_prob(&h[1..], w)
    }
}

#[test]
fn arpa_export_reproduces_model_probabilities() {
    let corpus = grammar_corpus(1, 300, 12);
    let vocab = Vocab::from_corpus(&corpus, 2);
    let lm = train_ngram(&corpus, &vocab, 3, NgramSmoothing::WittenBell, Direction::Forward).unwrap();
    let mut buf = Vec::new();
    lm.write_arpa(&mut buf).unwrap();
    let arpa = Arpa::parse(&String::from_utf8(buf).unwrap());
    let test = grammar_corpus(2, 30, 12);
    for s in &test {
        let mut hist = vec![BOS.to_string()];
        let mut ctx = Vec::new();
        for w in s.iter().map(|w| if vocab.contains(w) { w.as_str() } else { UNK }).chain([EOS]) {
            let id = vocab.id(w);
            let ours = lm.log_prob(&ctx, id) / std::f64::consts::LN_10;
            let theirs = arpa.log10_prob(&hist, w);
            assert!((ours - theirs).abs() < 1e-5, "{:?} {}: {} vs {}", hist, w, ours, theirs);
            hist.push(w.to_string());
            ctx.push(id);
        }
    }
}

#[test]
fn trigram_beats_unigram_on_held_out() {
    let train = grammar_corpus(3, 2200, 30);
    assert!(train.iter().map(Vec::len).sum::<usize>() >= 10_000);
    let held = grammar_corpus(4, 200, 30);
    let vocab = Vocab::from_corpus(&train, 2);
    let ppl = |order| {
        let lm = train_ngram(&train, &vocab, order, NgramSmoothing::WittenBell, Direction::Forward).unwrap();
        perplexity(&lm, &held).unwrap().perplexity
    };
    let (uni, tri) = (ppl(1), ppl(3));
    assert!(tri <= uni, "trigram {} unigram {}", tri, uni);
}

#[test]
fn sampled_histories_normalise() {
    let train = grammar_corpus(5, 500, 20);
    let vocab = Vocab::from_corpus(&train, 2);
    let lm = train_ngram(&train, &vocab, 3, NgramSmoothing::WittenBell, Direction::Forward).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hs = lm.histories();
    for _ in 0..100 {
        let h = &hs[rng.random_range(0..hs.len())];
        let s: f64 = (0..vocab.len() as WordId).map(|w| lm.prob_given_history(h, w)).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn interpolated_distribution_normalises() {
    let train = grammar_corpus(7, 200, 10);
    let vocab = Vocab::from_corpus(&train, 2);
    let ng = train_ngram(&train, &vocab, 3, NgramSmoothing::WittenBell, Direction::Forward).unwrap();
    let cfg = RnnConfig { embed_dim: 8, hidden: vec![8], extra_layer: Some(8), ..Default::default() };
    let r1 = ToyRecurrentLM::new(cfg.clone(), &vocab).unwrap();
    let r2 = ToyRecurrentLM::new(RnnConfig { seed: 2, encoding: InputEncoding::LetterTrigram, ..cfg }, &vocab).unwrap();
    let mix = InterpolatedLm::new(vec![&r1, &r2, &ng], InterpolationSpec::default()).unwrap();
    for s in train.iter().take(10) {
        let ids = vocab.encode(s);
        for i in 0..ids.len() {
            let total: f64 = mix.distribution(&ids[..i]).iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
    let bwd = train_ngram(&train, &vocab, 3, NgramSmoothing::WittenBell, Direction::Backward).unwrap();
    assert!(InterpolatedLm::new(vec![&r1, &r2, &bwd], InterpolationSpec::default()).is_err());
}

#[test]
fn backward_rnn_is_forward_chain_rule_on_reversed_tokens() {
    let train = grammar_corpus(8, 50, 6);
    let vocab = Vocab::from_corpus(&train, 1);
    let cfg = RnnConfig { direction: Direction::Backward, embed_dim: 6, hidden: vec![6], extra_layer: None, ..Default::default() };
    let m = ToyRecurrentLM::new(cfg, &vocab).unwrap();
    let s = vocab.encode(&train[0][..3]);
    let r: Vec<WordId> = s.iter().rev().copied().collect();
    let chain = m.log_prob(&[], r[0]) + m.log_prob(&r[..1], r[1]) + m.log_prob(&r[..2], r[2]) + m.log_prob(&r, EOS_ID);
    assert!((m.sentence_logprob(&s) - chain).abs() < 1e-12);
}

fn rnn_setup() -> (Vec<Vec<String>>, Vec<Vec<String>>, Vec<Vec<String>>, Vocab) {
    let ind = grammar_corpus(10, 400, 15);
    let ood = grammar_corpus(11, 400, 15).into_iter().map(|s| s.into_iter().rev().collect()).collect();
    let valid = grammar_corpus(12, 80, 15);
    let vocab = Vocab::from_corpus(&ind, 2);
    (ind, ood, valid, vocab)
}

#[test]
fn two_phase_training_keeps_best_checkpoint_and_beats_unigram() {
    let (ind, ood, valid, vocab) = rnn_setup();
    let uni = train_ngram(&ind, &vocab, 1, NgramSmoothing::WittenBell, Direction::Forward).unwrap();
    let uni_ppl = perplexity(&uni, &valid).unwrap().perplexity;
    let train = RnnTrainConfig { phase1_passes: 2, max_phase2_epochs: 4, ..Default::default() };
    let cfg = RnnConfig { embed_dim: 16, hidden: vec![16], extra_layer: Some(16), ..Default::default() };
    let a = train_recurrent_lm(&ind, &ood, &valid, &vocab, &cfg, &train).unwrap();
    let b = train_recurrent_lm(&ind, &ood, &valid, &vocab, &RnnConfig { seed: 2, ..cfg }, &train).unwrap();
    for t in [&a, &b] {
        assert!(t.final_perplexity <= t.phase1_perplexity);
        assert!(t.final_perplexity < uni_ppl, "{} vs unigram {}", t.final_perplexity, uni_ppl);
        let check = perplexity(&t.model, &valid).unwrap().perplexity;
        assert!((check - t.final_perplexity).abs() < 1e-9);
    }
    assert_ne!(a.model.params, b.model.params);
}

#[test]
fn diverging_rnn_training_is_reported() {
    let (ind, ood, valid, vocab) = rnn_setup();
    let train = RnnTrainConfig { learning_rate: f64::INFINITY, phase1_passes: 1, ..Default::default() };
    let cfg = RnnConfig { embed_dim: 8, hidden: vec![8], extra_layer: None, ..Default::default() };
    assert!(matches!(
        train_recurrent_lm(&ind, &ood, &valid, &vocab, &cfg, &train),
        Err(LmError::TrainingDiverged(_))
    ));
}
