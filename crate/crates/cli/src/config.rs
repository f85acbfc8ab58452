//! Run configuration document.

use aerobatch::dataset::{ActionLabel, DatasetSpec};
use aerobatch::diffusion::TrainConfig;
use aerobatch::environment::{ScenarioKind, ScenarioParams};
use aerobatch::guidance::{GuidanceConfig, Variant};
use aerobatch::postprocess::optimize::PostprocessConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Scenario and chain-plan seed. `--seed` also overrides the dataset and
    /// training seeds.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    /// `dataset` also writes `dataset.json` for inspection.
    #[serde(default)]
    pub export_json: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub inputs: Inputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            dataset: DatasetSpec::default(),
            export_json: false,
            train: TrainConfig::default(),
            scenario: ScenarioConfig::default(),
            guidance: GuidanceConfig::default(),
            chain: ChainConfig::default(),
            postprocess: PostprocessConfig::default(),
            ablation: AblationConfig::default(),
            inputs: Inputs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// `None` is open space inside `params.bounds`.
    pub kind: Option<ScenarioKind>,
    pub params: ScenarioParams,
    /// SDF voxel edge (m).
    pub voxel: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: None,
            params: ScenarioParams::default(),
            voxel: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub n_aero: usize,
    /// Distance between consecutive planned targets along the start heading.
    pub spacing: f64,
    /// Entry speed of the level-flight history stub.
    pub speed: f64,
    pub variant: Variant,
    /// Per-primitive actions; random maneuvers when absent.
    pub actions: Option<Vec<ActionLabel>>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_aero: 3,
            spacing: 6.0,
            speed: 2.5,
            variant: Variant::Ours,
            actions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Largest chain length; every prefix length is reported.
    pub n_aero: usize,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            n_aero: 3,
            variants: Variant::ALL.to_vec(),
        }
    }
}

/// Upstream artifacts, relative to the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub chain: Option<PathBuf>,
    /// Artifact rendered by `plot`.
    pub artifact: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("config schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: cfg.schema_version,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.dataset.validate().map_err(|e| bad(&e))?;
        self.train.validate().map_err(|e| bad(&e))?;
        self.guidance.validate(self.train.schedule.steps).map_err(|e| bad(&e))?;
        if self.train.model.n_a != self.dataset.n_a || self.train.model.n_h != self.dataset.n_h {
            return Err(ConfigError::Invalid("model n_a/n_h differ from the dataset".into()));
        }
        if self.chain.n_aero == 0 || !(self.chain.spacing > 0.0) || !(self.chain.speed > 0.0) {
            return Err(ConfigError::Invalid("chain needs n_aero >= 1 and positive spacing and speed".into()));
        }
        if let Some(a) = &self.chain.actions {
            if a.len() != self.chain.n_aero {
                return Err(ConfigError::Invalid(format!(
                    "chain.actions has {} entries for n_aero = {}",
                    a.len(),
                    self.chain.n_aero
                )));
            }
        }
        if self.ablation.seeds.len() < 2 || self.ablation.n_aero == 0 || self.ablation.variants.is_empty() {
            return Err(ConfigError::Invalid("ablation needs >= 2 seeds, n_aero >= 1 and a variant".into()));
        }
        Ok(())
    }

    /// Apply a command-line seed to every seeded stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.dataset.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
