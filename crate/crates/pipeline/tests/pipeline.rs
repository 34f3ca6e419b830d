use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use convasr::config::{PipelineConfig, WorldConfig};
use convasr::error::PipelineError;
use convasr::stages::{run_all, run_stage, Stage, COMBINE, CN, REPORT_FILE, SCORE, WORLD};
use convasr::world::{error_overlap, first_best, World, SCORED_SPLITS, SPLITS};

fn tiny(work: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig { work_dir: work.to_path_buf(), ..Default::default() };
    cfg.world = WorldConfig {
        train_utterances: 24,
        dev_utterances: 10,
        eval_utterances: 10,
        lm_in_domain_sentences: 200,
        lm_out_domain_sentences: 100,
        lm_valid_sentences: 30,
        candidates: 10,
        pool_size: 30,
        ..Default::default()
    };
    cfg.am.hidden = vec![8];
    cfg.am.epochs = 1;
    cfg.lm.embed_dim = 8;
    cfg.lm.hidden = 8;
    cfg.lm.extra_layer = None;
    cfg.lm.phase1_passes = 1;
    cfg.lm.max_phase2_epochs = 1;
    cfg.rescore.sweeps = 1;
    cfg
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_stage(&tiny(a.path()), Stage::Gen).unwrap();
    run_stage(&tiny(b.path()), Stage::Gen).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.len() > 10);
    assert_eq!(sa, sb);
}

#[test]
fn another_seed_changes_the_world() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_stage(&tiny(a.path()), Stage::Gen).unwrap();
    let mut cfg = tiny(b.path());
    cfg.seed += 1;
    run_stage(&cfg, Stage::Gen).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let key = Path::new(WORLD).join("eval").join("text");
    assert_ne!(sa[&key], sb[&key]);
}

#[test]
fn splits_are_disjoint() {
    let world = World::generate(17, &tiny(Path::new("unused")).world);
    let mut seen = std::collections::BTreeSet::new();
    for split in SPLITS {
        for u in &world.splits[split] {
            assert!(seen.insert(u.utt_id.clone()));
            assert!(u.side.starts_with(split));
        }
    }
}

fn overlap_at(correlation: f64) -> f64 {
    let cfg = WorldConfig { systems: 2, error_correlation: correlation, ..Default::default() };
    let world = World::generate(17, &cfg);
    let refs = world.references("eval");
    let a = first_best(&world.nbest["sys0"]["eval"]);
    let b = first_best(&world.nbest["sys1"]["eval"]);
    error_overlap(&refs, &a, &b)
}

#[test]
fn uncorrelated_systems_make_different_errors() {
    let o = overlap_at(0.0);
    assert!(o < 0.3, "overlap {}", o);
}

#[test]
fn fully_correlated_systems_agree() {
    let cfg = WorldConfig { systems: 2, error_correlation: 1.0, ..tiny(Path::new("unused")).world };
    let world = World::generate(17, &cfg);
    for split in SCORED_SPLITS {
        for (a, b) in world.nbest["sys0"][split].iter().zip(&world.nbest["sys1"][split]) {
            assert_eq!(a.hypotheses, b.hypotheses);
        }
    }
}

#[test]
fn minimal_configuration_scores_one_system() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.world.systems = 1;
    cfg.stages.train_am = false;
    cfg.stages.cn = false;
    cfg.stages.combine = false;
    let report = run_all(&cfg).unwrap();
    assert!(report.contains("sys0"));
    assert!(!report.contains("combined"));
    assert!(dir.path().join(SCORE).join("report.json").exists());
    assert!(!dir.path().join(CN).exists());
    assert!(!dir.path().join(COMBINE).exists());
}

#[test]
fn full_run_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_all(&tiny(a.path())).unwrap();
    let rb = run_all(&tiny(b.path())).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(fs::read(a.path().join(REPORT_FILE)).unwrap(), ra.as_bytes());
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn tampered_input_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_stage(&cfg, Stage::Gen).unwrap();
    let text = dir.path().join(WORLD).join("lm").join("in_domain.txt");
    let mut body = fs::read_to_string(&text).unwrap();
    body.push_str("extra line\n");
    fs::write(&text, body).unwrap();
    let err = run_stage(&cfg, Stage::TrainLm).unwrap_err();
    assert_eq!(err.exit_code(), 5, "{}", err);
}

#[test]
fn truncated_nbest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_stage(&cfg, Stage::Gen).unwrap();
    run_stage(&cfg, Stage::TrainLm).unwrap();
    let lists = dir.path().join(WORLD).join("nbest").join("sys0.eval.jsonl");
    let body = fs::read_to_string(&lists).unwrap();
    fs::write(&lists, body.lines().skip(1).map(|l| format!("{}\n", l)).collect::<String>()).unwrap();
    let err = run_stage(&cfg, Stage::Rescore).unwrap_err();
    assert_eq!(err.exit_code(), 5, "{}", err);
}

#[test]
fn missing_upstream_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_stage(&tiny(dir.path()), Stage::Rescore).unwrap_err();
    assert!(matches!(err, PipelineError::Stage { .. }));
    assert_eq!(err.exit_code(), 3, "{}", err);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_convasr")).args(args).env("RUST_LOG", "off").output().unwrap()
}

#[test]
fn cli_exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nno_such_key = 2\n").unwrap();
    let out = cli(&["--config", bad.to_str().unwrap(), "config"]);
    assert_eq!(out.status.code(), Some(2));

    let invalid = dir.path().join("invalid.toml");
    fs::write(&invalid, "[world]\nsystems = 0\n").unwrap();
    assert_eq!(cli(&["--config", invalid.to_str().unwrap(), "config"]).status.code(), Some(2));

    let work = dir.path().join("work");
    let out = cli(&["--work-dir", work.to_str().unwrap(), "rescore"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn cli_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--seed", "5", "config"]);
    assert!(out.status.success());
    let path = dir.path().join("cfg.toml");
    fs::write(&path, &out.stdout).unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg, PipelineConfig { seed: 5, ..Default::default() });
}
