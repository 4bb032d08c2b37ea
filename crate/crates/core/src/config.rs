//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};
use crate::masks::MaskSpec;
use crate::metrics::Scope;
use crate::network::{DataRange, NetworkConfig};
use crate::synth::Relation;
use crate::trainer::TrainConfig;

/// Synthetic scenes used for training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub relation: Relation,
    /// Number of training scenes per seed; one further scene is held out.
    pub train_scenes: usize,
    pub data_range: DataRange,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            bands: 2,
            height: 256,
            width: 256,
            relation: Relation::Nonlinear,
            train_scenes: 1,
            data_range: DataRange::default(),
        }
    }
}

fn default_shifts() -> Vec<i32> {
    (0..=5).collect()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_network() -> NetworkConfig {
    NetworkConfig::new(2)
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn one() -> usize {
    1
}

fn default_direction() -> [i32; 2] {
    [1, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default = "default_network")]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Scope used for headline numbers; reports always include both scopes.
    #[serde(default = "default_scope")]
    pub scope: Scope,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Repetitions; each seed draws its own scenes, masks and initial weights.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Registration errors (pixels) evaluated by the sweep.
    #[serde(default = "default_shifts")]
    pub shifts: Vec<i32>,
    /// Unit `(dx, dy)` step multiplied by each shift.
    #[serde(default = "default_direction")]
    pub shift_direction: [i32; 2],
    /// Polynomial degree of the band-fitting baseline.
    #[serde(default = "one")]
    pub lf_degree: usize,
}

fn default_scope() -> Scope {
    Scope::GapOnly
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            mask: MaskSpec::default(),
            network: default_network(),
            train: TrainConfig::default(),
            scope: default_scope(),
            output_dir: default_output(),
            seeds: default_seeds(),
            shifts: default_shifts(),
            shift_direction: default_direction(),
            lf_degree: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| StsError::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.bands == 0 || d.height == 0 || d.width == 0 || d.train_scenes == 0 {
            return Err(StsError::Config(
                "dataset dimensions and scene count must be positive".into(),
            ));
        }
        if self.network.input_bands != d.bands {
            return Err(StsError::Config(format!(
                "network.input_bands ({}) differs from dataset.bands ({})",
                self.network.input_bands, d.bands
            )));
        }
        self.network.validate()?;
        self.train.validate()?;
        if self.train.patch_size > d.height.min(d.width) {
            return Err(StsError::Config(format!(
                "patch_size {} exceeds scene {}×{}",
                self.train.patch_size, d.height, d.width
            )));
        }
        if self.seeds.is_empty() {
            return Err(StsError::Config("at least one seed is required".into()));
        }
        if self.lf_degree == 0 {
            return Err(StsError::Config("lf_degree must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"dataset": {"bandz": 2}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"epoch": 2}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"mask": {"kind": "cloud", "coverage": 0.2, "x": 1}}"#).is_err());
    }

    #[test]
    fn band_count_must_agree() {
        let text = r#"{"dataset": {"bands": 3}}"#;
        assert!(matches!(ExperimentConfig::from_json(text), Err(StsError::Config(_))));
    }
}
