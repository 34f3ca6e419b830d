use convasr_core::rescore::*;
use convasr_core::score::ScoreConfig;
use proptest::prelude::*;

const FEATS: [&str; 3] = [AM_SCORE, NGRAM_LM, OOV_COUNT];

fn hyp_strategy() -> impl Strategy<Value = Hypothesis> {
    (prop::collection::vec(0u8..4, 1..5), prop::collection::vec(-50.0..0.0f64, 3)).prop_map(|(w, f)| {
        let words = w.iter().map(|c| format!("w{}", c)).collect();
        FEATS.iter().zip(f).fold(Hypothesis::new(words), |h, (n, v)| h.with_feature(n, v))
    })
}

fn list_strategy() -> impl Strategy<Value = (NBestList, Vec<String>)> {
    (prop::collection::vec(hyp_strategy(), 1..6), prop::collection::vec(0u8..4, 1..5)).prop_map(|(h, r)| {
        let l = NBestList { utt_id: "u".into(), source_system: "s".into(), hypotheses: h };
        (l, r.iter().map(|c| format!("w{}", c)).collect())
    })
}

fn weights_strategy() -> impl Strategy<Value = ScoreWeights> {
    prop::collection::vec(-3.0..3.0f64, 3).prop_map(|v| {
        let mut w = ScoreWeights::from_pairs(&FEATS.iter().copied().zip(v).collect::<Vec<_>>());
        w.set(AM_SCORE, 1.0);
        w
    })
}

proptest! {
    #[test]
    fn score_is_linear_in_weights(h in hyp_strategy(), w in weights_strategy(), alpha in -4.0..4.0f64) {
        let a = score_hypothesis(&h, &w.scaled(alpha)).unwrap();
        let b = alpha * score_hypothesis(&h, &w).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn argmax_ignores_constant_feature_shift((l, _) in list_strategy(), w in weights_strategy(), k in 0usize..3, c in -20.0..20.0f64) {
        let mut shifted = l.clone();
        for h in &mut shifted.hypotheses {
            *h.features.get_mut(FEATS[k]).unwrap() += c;
        }
        let (i, j) = (best_index(&l, &w).unwrap(), best_index(&shifted, &w).unwrap());
        // a shift can only reorder hypotheses whose scores differ by rounding
        let s = |x: &NBestList, i: usize| score_hypothesis(&x.hypotheses[i], &w).unwrap();
        prop_assert!(i == j || (s(&l, i) - s(&l, j)).abs() < 1e-9);
    }

    #[test]
    fn oracle_bounds_one_best((l, r) in list_strategy(), w in weights_strategy()) {
        let cfg = ScoreConfig::default();
        let oracle = oracle_wer(&l, &r, &cfg).unwrap();
        let best = hypothesis_wer(&r, &l.hypotheses[best_index(&l, &w).unwrap()].words, &cfg).unwrap();
        prop_assert!(oracle <= best);
        for h in &l.hypotheses {
            prop_assert!(oracle <= hypothesis_wer(&r, &h.words, &cfg).unwrap());
        }
    }

    #[test]
    fn optimizer_never_worse_than_start(dev in prop::collection::vec(list_strategy(), 1..5), w in weights_strategy()) {
        let cfg = OptimizeConfig { sweeps: 2, ..Default::default() };
        let r = optimize_weights(&dev, &w, &cfg).unwrap();
        prop_assert!(r.wer <= r.initial_wer);
        prop_assert_eq!(r.initial_wer, dev_wer(&dev, &w, &cfg.score).unwrap());
        prop_assert_eq!(r.wer, dev_wer(&dev, &r.weights, &cfg.score).unwrap());
    }
}
