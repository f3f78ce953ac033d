//! Experiment configuration: one JSON document per run.
//!
//! ```json
//! {
//!   "method": "memo",
//!   "seed": 1993,
//!   "profile": "desk",
//!   "dataset": { "synthetic": { "classes": 10, "train_per_class": 100,
//!                               "test_per_class": 20, "dim": 16, "spread": 0.35 } },
//!   "split": { "base": 0, "increment": 2 },
//!   "backbone": { "hidden_dim": 16, "num_blocks": 3 },
//!   "budget": { "align_to": { "method": "der", "exemplars": 40 } },
//!   "learner": { "epochs": 30 },
//!   "probes": { "enabled": false }
//! }
//! ```
//!
//! Every field except `method` has a default. `learner` entries override the
//! chosen profile's schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learners::{LearnerConfig, Method};
use crate::membudget::DEFAULT_BYTES_PER_PARAM;
use crate::netblocks::BackboneSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 30 epochs, ×0.1 at epochs 15 and 25, batch 32.
    #[default]
    Desk,
    /// 170 epochs, ×0.1 at epochs 80 and 150, batch 128.
    FullScale,
}

impl Profile {
    pub fn learner(self, method: Method) -> LearnerConfig {
        match self {
            Profile::Desk => LearnerConfig::desk(method),
            Profile::FullScale => LearnerConfig::full_scale(method),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// CILD or CSV files; relative paths resolve against the config's directory.
    Files {
        train: PathBuf,
        test: PathBuf,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            train_per_class: 100,
            test_per_class: 20,
            dim: 16,
            spread: 0.35,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub base: usize,
    pub increment: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { base: 0, increment: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    /// Defaults to the last block.
    pub decomposition_index: Option<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden_dim: 16,
            num_blocks: 3,
            decomposition_index: None,
        }
    }
}

impl BackboneConfig {
    pub fn spec(&self, input_dim: usize) -> Result<BackboneSpec> {
        let spec = BackboneSpec::new(input_dim, self.hidden_dim, self.num_blocks)?;
        match self.decomposition_index {
            Some(k) => spec.with_decomposition(k),
            None => Ok(spec),
        }
    }
}

/// How the total memory budget is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetTarget {
    /// A fixed exemplar count; the total is whatever the model adds.
    Exemplars(usize),
    /// A total in binary megabytes; exemplars fill what the model leaves.
    TargetMb(f64),
    /// The total of `method`'s final model plus `exemplars` stored instances.
    AlignTo { method: Method, exemplars: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u64,
    /// Defaults to 4 bytes per feature (32-bit floats, as stored in CILD files).
    #[serde(default)]
    pub bytes_per_exemplar: Option<u64>,
    #[serde(flatten)]
    pub target: BudgetTarget,
}

fn default_bytes_per_param() -> u64 {
    DEFAULT_BYTES_PER_PARAM
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            bytes_per_param: DEFAULT_BYTES_PER_PARAM,
            bytes_per_exemplar: None,
            target: BudgetTarget::AlignTo {
                method: Method::Der,
                exemplars: 40,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub enabled: bool,
    /// Test instances used for the cross-backbone CKA.
    pub cka_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            enabled: false,
            cka_samples: 200,
        }
    }
}

/// A fully resolved experiment. `learner.method` always equals `method`;
/// `learner.seed` is derived from `seed` when the run starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub profile: Profile,
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub backbone: BackboneConfig,
    pub budget: BudgetConfig,
    pub learner: LearnerConfig,
    pub probes: ProbeConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    method: Method,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default)]
    profile: Profile,
    #[serde(default)]
    dataset: DatasetSource,
    #[serde(default)]
    split: SplitConfig,
    #[serde(default)]
    backbone: BackboneConfig,
    #[serde(default)]
    budget: BudgetConfig,
    #[serde(default)]
    learner: Option<Value>,
    #[serde(default)]
    probes: ProbeConfig,
}

fn default_seed() -> u64 {
    1993
}

impl ExperimentConfig {
    /// The default desk benchmark for `method`.
    pub fn desk(method: Method, seed: u64) -> Self {
        let learner = LearnerConfig::desk(method);
        ExperimentConfig {
            method,
            seed,
            profile: Profile::Desk,
            dataset: DatasetSource::default(),
            split: SplitConfig::default(),
            backbone: BackboneConfig::default(),
            budget: BudgetConfig::default(),
            learner,
            probes: ProbeConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)?;
        let mut base = serde_json::to_value(raw.profile.learner(raw.method))?;
        if let Some(overrides) = raw.learner {
            let Value::Object(map) = overrides else {
                return Err(Error::Config("`learner` must be an object".into()));
            };
            let target = base.as_object_mut().expect("learner config is an object");
            for (k, v) in map {
                if !target.contains_key(&k) {
                    return Err(Error::Config(format!("unknown learner field {k:?}")));
                }
                target.insert(k, v);
            }
        }
        let learner: LearnerConfig = serde_json::from_value(base)?;
        if learner.method != raw.method {
            return Err(Error::Config(format!(
                "learner.method {:?} contradicts method {:?}",
                learner.method.name(),
                raw.method.name()
            )));
        }
        let cfg = ExperimentConfig {
            method: raw.method,
            seed: raw.seed,
            profile: raw.profile,
            dataset: raw.dataset,
            split: raw.split,
            backbone: raw.backbone,
            budget: raw.budget,
            learner,
            probes: raw.probes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?;
        if let DatasetSource::Files { train, test } = &mut cfg.dataset {
            let dir = path.parent().unwrap_or(Path::new("."));
            for p in [train, test] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        if self.learner.method != self.method {
            return Err(Error::Config("learner method differs from method".into()));
        }
        if self.budget.bytes_per_param == 0 || self.budget.bytes_per_exemplar == Some(0) {
            return Err(Error::Config("byte costs must be at least 1".into()));
        }
        if let BudgetTarget::TargetMb(mb) = self.budget.target {
            if !(mb > 0.0 && mb.is_finite()) {
                return Err(Error::Config(format!("target {mb} MB must be positive")));
            }
        }
        self.backbone.spec(1)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
