//! Experiment configuration (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::MergeMode;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_CANDIDATES;
use crate::nn::{NormPlacement, INIT_STD};
use crate::synth::{validate_specs, ClipGeometry, TaskSpec};
use crate::train::{TrainConfig, TrunkShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Translator,
    PrimaryOnly,
    FrozenRandomAblation,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Translator, Arm::PrimaryOnly, Arm::FrozenRandomAblation];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Translator => "translator",
            Arm::PrimaryOnly => "primary_only",
            Arm::FrozenRandomAblation => "frozen_random_ablation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm '{s}'")))
    }
}

/// A task spec plus the shape of its stage-1 trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    #[serde(flatten)]
    pub spec: TaskSpec,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    pub feature_dim: usize,
    #[serde(default = "default_taps")]
    pub mix_taps: usize,
}

fn default_hidden() -> usize {
    16
}

fn default_taps() -> usize {
    4
}

impl TaskEntry {
    pub fn shape(&self) -> TrunkShape {
        TrunkShape {
            hidden_dim: self.hidden_dim,
            feature_dim: self.feature_dim,
            mix_taps: self.mix_taps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub stride_s: f64,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default)]
    pub merge: MergeMode,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    INIT_STD
}

/// Sample counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSection {
    pub stage1_train: usize,
    pub stage1_val: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Candidate sequences scored by ED@Z.
    pub candidates: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheSection {
    pub enabled: bool,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self { enabled: true }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_arms() -> Vec<Arm> {
    Arm::ALL.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
    pub clip: ClipGeometry,
    pub data: DataSection,
    pub tasks: Vec<TaskEntry>,
    pub translator: TranslatorSection,
    #[serde(default)]
    pub stage1: TrainConfig,
    #[serde(default)]
    pub stage2: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub cache: CacheSection,
}

/// The fields that determine results, hashed for report provenance.
#[derive(Serialize)]
struct Hashed<'a> {
    clip: &'a ClipGeometry,
    data: &'a DataSection,
    tasks: &'a [TaskEntry],
    translator: &'a TranslatorSection,
    stage1: &'a TrainConfig,
    stage2: &'a TrainConfig,
    eval: &'a EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|t| t.spec.clone()).collect()
    }

    pub fn primary(&self) -> &TaskEntry {
        self.tasks
            .iter()
            .find(|t| t.spec.primary)
            .expect("validated config has a primary task")
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip.frames() == 0 || !(self.clip.duration_s > 0.0) || !(self.clip.fps > 0.0) {
            return Err(Error::Config("clip needs positive duration and fps".into()));
        }
        validate_specs(&self.specs(), self.clip.channels).map_err(|e| Error::Config(e.to_string()))?;
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.spec.task_id.as_str()) {
                return Err(Error::Config(format!("duplicate task '{}'", t.spec.task_id)));
            }
            if t.hidden_dim == 0 || t.feature_dim == 0 || t.mix_taps == 0 {
                return Err(Error::Config(format!(
                    "task '{}': trunk widths must be positive",
                    t.spec.task_id
                )));
            }
            if t.spec.native_fps > self.clip.fps {
                return Err(Error::Config(format!(
                    "task '{}': native fps {} above clip fps {}",
                    t.spec.task_id, t.spec.native_fps, self.clip.fps
                )));
            }
            if t.spec.native_window_s > self.clip.duration_s {
                return Err(Error::Config(format!(
                    "task '{}': window {} s longer than clip {} s",
                    t.spec.task_id, t.spec.native_window_s, self.clip.duration_s
                )));
            }
        }
        let tr = &self.translator;
        if tr.d_model == 0 || tr.heads == 0 || tr.d_model % tr.heads != 0 || tr.layers == 0 || tr.d_ff == 0 {
            return Err(Error::Config(
                "translator: d_model must be a positive multiple of heads; layers and d_ff > 0".into(),
            ));
        }
        if !(tr.stride_s > 0.0) || !(tr.init_std > 0.0) {
            return Err(Error::Config("translator: stride_s and init_std must be > 0".into()));
        }
        let d = &self.data;
        if [d.stage1_train, d.stage1_val, d.train, d.val, d.test].contains(&0) {
            return Err(Error::Config("every data split needs at least one sample".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.eval.candidates == 0 {
            return Err(Error::Config("eval.candidates must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("arms must not be empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every result-affecting field. Keys
    /// are sorted, so the hash ignores key order in the source file; seeds,
    /// arms and output directory are excluded.
    pub fn hash(&self) -> String {
        let hashed = Hashed {
            clip: &self.clip,
            data: &self.data,
            tasks: &self.tasks,
            translator: &self.translator,
            stage1: &self.stage1,
            stage2: &self.stage2,
            eval: &self.eval,
        };
        let value = serde_json::to_value(&hashed).expect("config serializes");
        let text = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Built-in configuration used by the acceptance suite and `examples/`.
pub const DEFAULT_CONFIG: &str = include_str!("../../configs/default.toml");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parses() {
        let c = ExperimentConfig::from_toml(DEFAULT_CONFIG).unwrap();
        assert_eq!(c.tasks.len(), 3);
        assert!(c.primary().spec.primary);
    }

    #[test]
    fn hash_ignores_seeds_and_out_dir() {
        let a = ExperimentConfig::from_toml(DEFAULT_CONFIG).unwrap();
        let mut b = a.clone();
        b.seeds = vec![9];
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.stage2.lr = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_arm_and_bad_values_rejected() {
        assert!(Arm::parse("nope").is_err());
        let bad = DEFAULT_CONFIG.replace("d_model = 16", "d_model = 15");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
    }
}
