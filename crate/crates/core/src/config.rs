//! Serializable experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureSource;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::synth::SceneSpec;
use crate::trainer::TrainConfig;

/// Which network of a checkpoint supplies evaluation features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    Teacher,
    Student,
}

/// Which split the retrieval memory bank is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankSplit {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Trailing fraction of the dataset held out for evaluation.
    pub eval_fraction: f64,
    pub weights: Weights,
    pub feature_source: FeatureSource,
    /// Cluster count; `None` means three times the class count.
    pub overcluster_k: Option<usize>,
    pub seeds: Vec<u64>,
    pub kmeans_iters: usize,
    pub nn_k: usize,
    /// Bank down-sampling ratios (1 keeps everything, 8 keeps 1/8, ...).
    pub fractions: Vec<usize>,
    pub bank: BankSplit,
    pub exclude_self: bool,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_fraction: 0.5,
            weights: Weights::Teacher,
            feature_source: FeatureSource::Backbone,
            overcluster_k: None,
            seeds: vec![0, 1, 2, 3, 4],
            kmeans_iters: 50,
            nn_k: 30,
            fractions: vec![1, 8, 64],
            bank: BankSplit::Train,
            exclude_self: true,
            probe: ProbeConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config("eval_fraction must lie in (0, 1)".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one evaluation seed is required".into()));
        }
        if self.nn_k == 0 || self.fractions.iter().any(|&f| f == 0) {
            return Err(Error::Config("nn_k and fractions must be positive".into()));
        }
        if self.overcluster_k == Some(0) {
            return Err(Error::Config("overcluster_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self { data_dir: PathBuf::from("data"), run_dir: PathBuf::from("runs/default") }
    }
}

impl OutputPaths {
    pub fn checkpoint(&self) -> PathBuf {
        self.run_dir.join("checkpoint.paka")
    }

    pub fn steps_csv(&self) -> PathBuf {
        self.run_dir.join("steps.csv")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.run_dir.join("metrics.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub count: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            count: 400,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: OutputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
