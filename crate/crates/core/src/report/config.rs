//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::AssignerConfig;
use crate::conflict::{check_thresholds, default_thresholds};
use crate::detector::DetectorSpec;
use crate::engine::{DistillConfig, Strategy};
use crate::error::{Error, Result};
use crate::harness::{SgdConfig, SyntheticDatasetSpec, TrainConfig};
use crate::objective::DetLossConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub spec: DetectorSpec,
    pub assigner: AssignerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub spec: DetectorSpec,
    pub assigner: AssignerConfig,
    pub epochs: usize,
    /// Initialization and shuffling seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: SgdConfig,
}

/// Strategies run side by side (each next to a no-KD baseline) by `distill`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub strategies: Vec<Strategy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConflictConfig {
    /// One teacher is trained per assigner when no checkpoints are given.
    pub teacher_assigners: Vec<AssignerConfig>,
    pub thresholds: Vec<f64>,
    /// Leading validation images scanned for conflicts.
    pub images: usize,
}

impl Default for ConflictConfig {
    fn default() -> Self {
        Self { teacher_assigners: Vec::new(), thresholds: default_thresholds(), images: 64 }
    }
}

/// Orderings a recipe is expected to reproduce.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectations {
    /// Every split index reaches the baseline mean AP.
    pub splits_reach_baseline: bool,
    /// `CROSSKD_A` reaches the baseline mean AP.
    pub crosskd_reaches_baseline: bool,
    /// `PRED_MIMIC` mean AP does not exceed `CROSSKD_A`.
    pub mimic_not_above_crosskd: bool,
    /// `CROSSKD_A` ends closer to the targets than `PRED_MIMIC`, which ends
    /// closer to the teacher.
    pub distance_ordering: bool,
    /// The last listed conflict teacher's curve lies on or above the first.
    pub conflict_dominance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: SyntheticDatasetSpec,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    #[serde(default)]
    pub det_loss: DetLossConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub conflict: ConflictConfig,
    #[serde(default)]
    pub expect: Expectations,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        for (role, spec) in [("teacher", &self.teacher.spec), ("student", &self.student.spec)] {
            spec.validate().map_err(|e| Error::config(format!("{role}.spec: {e}")))?;
            if spec.head.num_classes != self.dataset.num_classes {
                return Err(Error::config(format!(
                    "{role}.spec.head.num_classes is {} but the dataset has {} classes",
                    spec.head.num_classes, self.dataset.num_classes
                )));
            }
            if self.dataset.image_size % spec.max_stride() != 0 {
                return Err(Error::config(format!(
                    "dataset.image_size {} is not a multiple of the {role}'s largest stride {}",
                    self.dataset.image_size,
                    spec.max_stride()
                )));
            }
        }
        self.teacher.assigner.validate()?;
        self.student.assigner.validate()?;
        self.teacher.optimizer.validate()?;
        self.optimizer.validate()?;
        self.train.validate()?;
        self.distill.validate(self.student.spec.head.n_layers)?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        for a in &self.conflict.teacher_assigners {
            a.validate()?;
        }
        check_thresholds(&self.conflict.thresholds)
    }

    /// Hex SHA-256 of the canonical serialization, leaving out fields that
    /// do not change what a single run computes (`name`, `seeds`,
    /// `out_dir`, `expect`).
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.name = String::new();
        canonical.seeds = Vec::new();
        canonical.out_dir = PathBuf::new();
        canonical.expect = Expectations::default();
        let digest = Sha256::digest(canonical.to_toml_string().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}
