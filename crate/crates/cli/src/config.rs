//! The run configuration file: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use fastshap_core::data::{ColumnSpec, Schema, SplitFractions};
use fastshap_core::eval::{Estimator, GroundTruthConfig, RemovalMetric, DEFAULT_GRID_POINTS};
use fastshap_core::fastshap::FastShapConfig;
use fastshap_core::pipeline::{ClassifierConfig, ValueFunctionKind};
use fastshap_core::rng::derive_seed;
use fastshap_core::surrogate::SurrogateConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "FASTSHAP_OUTPUT";
pub const DEFAULT_OUTPUT_DIR: &str = "fastshap-runs";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub split: SplitFractions,
    pub model: ClassifierConfig,
    pub surrogate: SurrogateConfig,
    pub eval_model: SurrogateConfig,
    pub explainer: ExplainerConfig,
    pub benchmark: BenchmarkConfig,
    pub auc: AucConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Delimited file with a header row; relative paths resolve against the config file.
    pub path: PathBuf,
    pub label: String,
    pub features: Vec<ColumnSpec>,
}

impl DatasetConfig {
    pub fn schema(&self) -> Schema {
        Schema {
            features: self.features.clone(),
            label: self.label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub value_function: ValueFunctionKind,
    pub fastshap: FastShapConfig,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            value_function: ValueFunctionKind::Surrogate,
            fastshap: FastShapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Leading test-split instances to explain.
    pub instances: usize,
    pub methods: Vec<Estimator>,
    /// Budgets in model evaluations.
    pub budgets: Vec<usize>,
    /// Brute-force ground truth up to this many features; sampled beyond.
    pub exact_max_features: usize,
    pub ground_truth: GroundTruthConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            methods: Estimator::ALL.to_vec(),
            budgets: vec![16, 32, 64, 128, 256, 512, 1024, 2048],
            exact_max_features: 16,
            ground_truth: GroundTruthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AucConfig {
    pub instances: usize,
    pub grid_points: usize,
    pub random_rankings: usize,
    pub metrics: Vec<RemovalMetric>,
}

impl Default for AucConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            grid_points: DEFAULT_GRID_POINTS,
            random_rankings: 100,
            metrics: vec![RemovalMetric::Top1, RemovalMetric::LogOdds],
        }
    }
}

/// Pipeline stages, each with its own derived seed.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Split = 1,
    Model = 2,
    Surrogate = 3,
    EvalModel = 4,
    Explainer = 5,
    Benchmark = 6,
    Auc = 7,
    Background = 8,
}

impl RunConfig {
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, &[stage as u64])
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            if config.dataset.path.is_relative() && !config.dataset.path.as_os_str().is_empty() {
                config.dataset.path = dir.join(&config.dataset.path);
            }
            if let Some(out) = config.output_dir.as_mut().filter(|o| o.is_relative()) {
                *out = dir.join(&*out);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Validation(m));
        if self.dataset.path.as_os_str().is_empty() {
            return invalid("config has no [dataset] path".into());
        }
        if !self.dataset.path.exists() {
            return invalid(format!("dataset {} does not exist", self.dataset.path.display()));
        }
        if self.dataset.features.is_empty() || self.dataset.label.is_empty() {
            return invalid("[dataset] must declare a label column and at least one feature".into());
        }
        self.split.validate()?;
        for (name, train) in [
            ("model", &self.model.train),
            ("surrogate", &self.surrogate.train),
            ("eval_model", &self.eval_model.train),
        ] {
            train
                .validate()
                .map_err(|e| CliError::Validation(format!("[{name}.train]: {e}")))?;
        }
        self.explainer.fastshap.validate()?;
        if self.benchmark.instances == 0 || self.auc.instances == 0 {
            return invalid("benchmark and auc need at least one instance".into());
        }
        if self.auc.grid_points < 2 || self.auc.random_rankings == 0 {
            return invalid("auc needs at least two grid points and one random ranking".into());
        }
        Ok(())
    }

    /// Output root: the explicit flag, then the config, then the environment.
    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}
