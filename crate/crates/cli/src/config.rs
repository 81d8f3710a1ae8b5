//! The run configuration: a TOML file merged with command-line overrides,
//! validated as a whole before any command touches the filesystem.

use std::path::Path;

use foley_core::dataset::{Grid, SynthConfig};
use foley_core::generator::{ConditioningMode, GeneratorConfig};
use foley_core::training::TrainConfig;
use foley_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Minutes-scale models on 4 kHz, 2-second clips.
    Desk,
    /// Full-size models on 16 kHz, 10-second clips with 4096-wide features.
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile {other:?} (desk or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub categories: usize,
    pub clips_per_category: usize,
    pub test_per_category: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { categories: 4, clips_per_category: 16, test_per_category: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateSection {
    pub segment_s: f64,
}

impl Default for CurateSection {
    fn default() -> Self {
        CurateSection { segment_s: foley_core::curation::SEGMENT_SECONDS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub duration_s: f64,
    /// Softmax temperature; 0 picks the most likely code at every step.
    pub temperature: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection { duration_s: 2.0, temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub top_k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { top_k: vec![1, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Seeds data synthesis, model initialization, clip order and sampling.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub mode: ConditioningMode,
    pub synth: SynthSection,
    pub curate: CurateSection,
    pub train: TrainConfig,
    pub generate: GenerateSection,
    pub eval: EvalSection,
    /// `[train]` keys the config file set; the rest follow the mode.
    #[serde(skip)]
    train_keys: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: Profile::Desk,
            seed: 0,
            workers: 0,
            mode: ConditioningMode::Seq,
            synth: SynthSection::default(),
            curate: CurateSection::default(),
            train: TrainConfig::desk(ConditioningMode::Seq),
            generate: GenerateSection::default(),
            eval: EvalSection::default(),
            train_keys: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let bad = |e: toml::de::Error| Error::Config(format!("{}: {e}", path.display()));
        let mut cfg: RunConfig = toml::from_str(&text).map_err(bad)?;
        let raw: toml::Table = toml::from_str(&text).map_err(bad)?;
        if let Some(train) = raw.get("train").and_then(toml::Value::as_table) {
            cfg.train_keys = train.keys().cloned().collect();
        }
        cfg.set_mode(cfg.mode);
        Ok(cfg)
    }

    /// Switches the conditioning mode. Train settings that the config file
    /// left unset take that mode's desk defaults.
    pub fn set_mode(&mut self, mode: ConditioningMode) {
        self.mode = mode;
        let defaults = TrainConfig::desk(mode);
        let unset = |key: &str| !self.train_keys.iter().any(|k| k == key);
        if unset("epochs") {
            self.train.epochs = defaults.epochs;
        }
        if unset("grad_clip") {
            self.train.grad_clip = defaults.grad_clip;
        }
    }

    pub fn grid(&self) -> Grid {
        match self.profile {
            Profile::Desk => Grid::desk(),
            Profile::Full => Grid::full(),
        }
    }

    pub fn model(&self) -> GeneratorConfig {
        match self.profile {
            Profile::Desk => GeneratorConfig::desk(self.mode),
            Profile::Full => GeneratorConfig::full(self.mode),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let base = SynthConfig { categories: self.synth.categories, ..SynthConfig::desk() };
        match self.profile {
            Profile::Desk => base,
            Profile::Full => SynthConfig { grid: Grid::full(), feature_dim: 4096, flow_dim: 4096, ..base },
        }
    }

    /// Every cross-field problem, joined into one config error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut note = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        let model = self.model();
        let grid = self.grid();
        note(model.validate());
        note(grid.validate());
        note(self.synth_config().validate());
        let (cf, clip) = (model.coarse_frame, grid.clip_samples());
        let t = &self.train;
        if model.step != grid.step {
            problems.push(format!("model step {} differs from the data grid's {}", model.step, grid.step));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            problems.push(format!("train.learning_rate {} must be positive", t.learning_rate));
        }
        if t.batch_size == 0 {
            problems.push("train.batch_size must be at least 1".into());
        }
        if t.chunk_len % cf != 0 || t.chunk_len < 2 * cf {
            problems.push(format!("train.chunk_len {} must be a multiple of {cf} and at least {}", t.chunk_len, 2 * cf));
        }
        if t.chunk_len > clip {
            problems.push(format!("train.chunk_len {} exceeds the {clip}-sample clip", t.chunk_len));
        }
        if t.epochs == 0 && t.max_steps.is_none() {
            problems.push("train needs epochs or max_steps".into());
        }
        if self.synth.test_per_category > self.synth.clips_per_category {
            problems.push(format!(
                "synth.test_per_category {} exceeds clips_per_category {}",
                self.synth.test_per_category, self.synth.clips_per_category
            ));
        }
        if !(self.curate.segment_s > 0.0 && self.curate.segment_s.is_finite()) {
            problems.push(format!("curate.segment_s {} must be positive", self.curate.segment_s));
        }
        let g = &self.generate;
        if !(g.duration_s > 0.0 && g.duration_s.is_finite()) {
            problems.push(format!("generate.duration_s {} must be positive", g.duration_s));
        }
        if !(g.temperature >= 0.0 && g.temperature.is_finite()) {
            problems.push(format!("generate.temperature {} must be non-negative", g.temperature));
        }
        if self.eval.top_k.is_empty() || self.eval.top_k.contains(&0) {
            problems.push(format!("eval.top_k {:?} must be non-empty and positive", self.eval.top_k));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Written next to (or into) every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub run_config: RunConfig,
}

impl Provenance {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Provenance {
            tool: "foley".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            run_config: cfg.clone(),
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn every_problem_is_listed() {
        let mut cfg = RunConfig::default();
        cfg.train.chunk_len = 12;
        cfg.generate.duration_s = 0.0;
        cfg.eval.top_k = vec![];
        let msg = cfg.validate().unwrap_err().to_string();
        for needle in ["chunk_len", "duration_s", "top_k"] {
            assert!(msg.contains(needle), "{msg}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlr = 3").is_err());
        let cfg: RunConfig = toml::from_str("mode = \"flow\"\n[train]\nepochs = 2").unwrap();
        assert_eq!(cfg.mode, ConditioningMode::Flow);
        assert_eq!(cfg.train.epochs, 2);
    }

    #[test]
    fn unset_train_keys_follow_the_mode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "mode = \"frame\"\n[train]\nepochs = 5\n").unwrap();
        let mut cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.grad_clip, TrainConfig::desk(ConditioningMode::Frame).grad_clip);
        cfg.set_mode(ConditioningMode::Seq);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.grad_clip, TrainConfig::desk(ConditioningMode::Seq).grad_clip);
        let mut plain = RunConfig::default();
        plain.set_mode(ConditioningMode::Frame);
        assert_eq!(plain.train, TrainConfig::desk(ConditioningMode::Frame));
    }
}
