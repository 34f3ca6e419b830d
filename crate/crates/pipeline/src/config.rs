//! Pipeline configuration. Every block has defaults and unknown keys are
//! rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use convasr_core::am::{Nonlinearity, SpeakerMode, DEFAULT_SMOOTHING_WEIGHT};
use convasr_core::combine::{DEFAULT_LADDER, DEFAULT_POSTERIOR_SCALE, DEFAULT_SMOOTH};
use convasr_core::lm::{InterpolationSpec, DEFAULT_INTERPOLATION};
use convasr_core::rescore::DEFAULT_NBEST_DEPTH;
use convasr_core::score::DEFAULT_OPTIONAL;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    pub stages: Stages,
    pub world: WorldConfig,
    pub am: AmStageConfig,
    pub lm: LmStageConfig,
    pub rescore: RescoreStageConfig,
    pub combine: CombineStageConfig,
    pub score: ScoreStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            work_dir: PathBuf::from("work"),
            stages: Stages::default(),
            world: WorldConfig::default(),
            am: AmStageConfig::default(),
            lm: LmStageConfig::default(),
            rescore: RescoreStageConfig::default(),
            combine: CombineStageConfig::default(),
            score: ScoreStageConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    pub gen: bool,
    pub train_am: bool,
    pub train_lm: bool,
    pub rescore: bool,
    pub cn: bool,
    pub combine: bool,
    pub score: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self { gen: true, train_am: true, train_lm: true, rescore: true, cn: true, combine: true, score: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub phones: usize,
    pub feature_dim: usize,
    pub speaker_dim: usize,
    /// Conversation sides per dev or eval split; train gets twice as many.
    pub sides_per_split: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub eval_utterances: usize,
    pub lm_in_domain_sentences: usize,
    pub lm_out_domain_sentences: usize,
    pub lm_valid_sentences: usize,
    pub systems: usize,
    /// Correlation of the noise added to each system's emission scores.
    pub error_correlation: f64,
    pub system_noise: f64,
    pub emission_std: f64,
    /// Hypotheses each system keeps per utterance, best-scoring first.
    pub candidates: usize,
    /// Distinct hypotheses proposed per utterance before systems rank them.
    pub pool_size: usize,
    /// Probability that the reference itself is among the proposals.
    pub reference_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            phones: 12,
            feature_dim: 8,
            speaker_dim: 4,
            sides_per_split: 3,
            train_utterances: 200,
            dev_utterances: 50,
            eval_utterances: 50,
            lm_in_domain_sentences: 1500,
            lm_out_domain_sentences: 1500,
            lm_valid_sentences: 200,
            systems: 3,
            error_correlation: 0.2,
            system_noise: 2.5,
            emission_std: 1.5,
            candidates: 40,
            pool_size: 200,
            reference_rate: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmStageConfig {
    pub hidden: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub speaker_mode: SpeakerMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub smoothing_weight: f64,
    pub ce_weight: f64,
}

impl Default for AmStageConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            nonlinearity: Nonlinearity::Sigmoid,
            speaker_mode: SpeakerMode::Append,
            epochs: 3,
            learning_rate: 0.02,
            momentum: 0.9,
            smoothing_weight: DEFAULT_SMOOTHING_WEIGHT,
            ce_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmStageConfig {
    pub order: usize,
    /// Words must occur at least this often in-domain to enter the vocabulary.
    pub min_count: usize,
    pub interpolation: Vec<f64>,
    pub embed_dim: usize,
    pub hidden: usize,
    pub extra_layer: Option<usize>,
    pub learning_rate: f64,
    pub phase1_passes: usize,
    pub max_phase2_epochs: usize,
}

impl Default for LmStageConfig {
    fn default() -> Self {
        Self {
            order: 3,
            min_count: 2,
            interpolation: DEFAULT_INTERPOLATION.to_vec(),
            embed_dim: 16,
            hidden: 16,
            extra_layer: Some(16),
            learning_rate: 0.1,
            phase1_passes: 2,
            max_phase2_epochs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescoreStageConfig {
    pub nbest_depth: usize,
    pub sweeps: usize,
}

impl Default for RescoreStageConfig {
    fn default() -> Self {
        Self { nbest_depth: DEFAULT_NBEST_DEPTH, sweeps: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchKind {
    Ladder,
    Em,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CombineStageConfig {
    pub posterior_scale: f64,
    pub ladder: Vec<f64>,
    pub search: SearchKind,
    pub smooth: f64,
    /// System ids merged with equal weights before selection. Systems not
    /// named here enter selection on their own.
    pub groups: Vec<Vec<String>>,
}

impl Default for CombineStageConfig {
    fn default() -> Self {
        Self {
            posterior_scale: DEFAULT_POSTERIOR_SCALE,
            ladder: DEFAULT_LADDER.to_vec(),
            search: SearchKind::Ladder,
            smooth: DEFAULT_SMOOTH,
            groups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreStageConfig {
    pub optional_words: Vec<String>,
    pub table_rows: usize,
}

impl Default for ScoreStageConfig {
    fn default() -> Self {
        Self { optional_words: DEFAULT_OPTIONAL.iter().map(|s| s.to_string()).collect(), table_rows: 10 }
    }
}

pub fn system_ids(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("sys{}", k)).collect()
}

fn check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(PipelineError::Config(msg.to_string()))
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        check((2..=26).contains(&w.phones), "world.phones must be between 2 and 26")?;
        let possible: usize = (2..=4).map(|l| w.phones.pow(l)).sum();
        check(w.vocab_size >= 2 && w.vocab_size <= possible, "world.vocab_size out of range for the phone set")?;
        check(w.feature_dim > 0, "world.feature_dim must be positive")?;
        check(w.sides_per_split > 0, "world.sides_per_split must be positive")?;
        check(w.train_utterances > 0 && w.dev_utterances > 0 && w.eval_utterances > 0, "every split needs utterances")?;
        check(w.lm_in_domain_sentences > 0 && w.lm_valid_sentences > 0, "LM text sizes must be positive")?;
        check(w.systems > 0, "world.systems must be positive")?;
        check((0.0..=1.0).contains(&w.error_correlation), "world.error_correlation must lie in [0, 1]")?;
        check(w.system_noise >= 0.0 && w.emission_std > 0.0, "noise levels must be non-negative")?;
        check(w.candidates > 0 && w.pool_size > 0, "world.candidates and world.pool_size must be positive")?;
        check((0.0..=1.0).contains(&w.reference_rate), "world.reference_rate must lie in [0, 1]")?;

        let a = &self.am;
        check(!a.hidden.is_empty() && !a.hidden.contains(&0), "am.hidden needs non-empty layers")?;
        check(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.momentum), "am learning rate or momentum out of range")?;
        check(a.smoothing_weight >= 0.0 && a.ce_weight >= 0.0, "am weights must be non-negative")?;
        check(a.speaker_mode == SpeakerMode::None || w.speaker_dim > 0, "speaker conditioning needs world.speaker_dim > 0")?;

        let l = &self.lm;
        check(l.order >= 1 && l.min_count >= 1, "lm.order and lm.min_count must be at least 1")?;
        InterpolationSpec::new(l.interpolation.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
        check(l.interpolation.len() == 3, "lm.interpolation needs three weights (two recurrent models and the N-gram)")?;
        check(l.embed_dim > 0 && l.hidden > 0, "lm widths must be positive")?;

        check(self.rescore.nbest_depth > 0, "rescore.nbest_depth must be positive")?;

        let c = &self.combine;
        check(c.posterior_scale > 0.0, "combine.posterior_scale must be positive")?;
        check(!c.ladder.is_empty() && c.ladder.iter().all(|&x| x > 0.0), "combine.ladder needs positive weights")?;
        check((0.0..=1.0).contains(&c.smooth), "combine.smooth must lie in [0, 1]")?;
        let ids: BTreeSet<String> = system_ids(w.systems).into_iter().collect();
        let mut seen = BTreeSet::new();
        for g in &c.groups {
            check(!g.is_empty(), "combine.groups entries must be non-empty")?;
            for s in g {
                check(ids.contains(s), &format!("combine.groups names unknown system {}", s))?;
                check(seen.insert(s.clone()), &format!("system {} appears in two groups", s))?;
            }
        }
        Ok(())
    }

    /// Groups for two-stage combination, covering every system.
    pub fn combination_groups(&self) -> Vec<Vec<String>> {
        let mut groups = self.combine.groups.clone();
        let named: BTreeSet<&String> = groups.iter().flatten().collect();
        let rest: Vec<Vec<String>> = system_ids(self.world.systems).into_iter().filter(|s| !named.contains(s)).map(|s| vec![s]).collect();
        groups.extend(rest);
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.lm.interpolation, vec![0.375, 0.375, 0.25]);
        assert_eq!(c.combine.ladder, vec![1.0, 0.5, 0.2, 0.1]);
        assert_eq!(c.rescore.nbest_depth, 500);
        assert_eq!(c.am.smoothing_weight, 0.1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(PipelineConfig::from_toml("seeed = 3"), Err(PipelineError::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("[world]\nsystemz = 2"), Err(PipelineError::Config(_))));
        let c = PipelineConfig::from_toml("seed = 5\n[world]\nsystems = 1").unwrap();
        assert_eq!((c.seed, c.world.systems, c.world.vocab_size), (5, 1, 40));
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            "[world]\nerror_correlation = 1.5",
            "[lm]\ninterpolation = [0.5, 0.6, 0.1]",
            "[combine]\ngroups = [[\"sys0\"], [\"sys0\"]]",
            "[combine]\ngroups = [[\"sys9\"]]",
            "[world]\nphones = 30",
        ] {
            assert!(PipelineConfig::from_toml(bad).is_err(), "{}", bad);
        }
    }

    #[test]
    fn groups_cover_all_systems() {
        let c = PipelineConfig::from_toml("[combine]\ngroups = [[\"sys2\", \"sys0\"]]").unwrap();
        assert_eq!(c.combination_groups(), vec![vec!["sys2".to_string(), "sys0".into()], vec!["sys1".into()]]);
    }
}
