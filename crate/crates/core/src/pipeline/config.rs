use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::EpisodeConfig;
use crate::error::{Error, Result};
use crate::forest::{ForestConfig, ForestGrid, DEFAULT_SELF_LABEL_ITERATIONS};
use crate::metrics::Criterion;
use crate::model::{Architecture, NetConfig};
use crate::numerics::{hex, Pooling};
use crate::synth::{symmetries, GeneratorConfig, ShiftDescriptor, SplitCounts};
use crate::train::{TrainConfig, TrainGrid, FINE_TUNE_FACTORS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSettings {
    pub width: usize,
    pub layers: usize,
    pub pooling: Pooling,
    pub architecture: Architecture,
}

impl Default for NetSettings {
    fn default() -> Self {
        NetSettings {
            width: 100,
            layers: 5,
            pooling: Pooling::Mean,
            architecture: Architecture::Paired,
        }
    }
}

impl NetSettings {
    pub fn net_config(&self, feature_dim: usize, seed: u64) -> NetConfig {
        NetConfig {
            pooling: self.pooling,
            architecture: self.architecture,
            ..NetConfig::new(feature_dim, self.width, self.layers, seed)
        }
    }
}

/// Meta-training settings shared by every grid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub episodes: EpisodeConfig,
    /// Keep a numbered checkpoint every N epochs (0 keeps only the latest).
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            epochs: t.epochs,
            batch_size: t.batch_size,
            episodes: t.episodes,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneSettings {
    pub factors: Vec<f64>,
    pub passes: f64,
}

impl Default for FineTuneSettings {
    fn default() -> Self {
        FineTuneSettings {
            factors: FINE_TUNE_FACTORS.to_vec(),
            passes: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageToggles {
    pub self_label: bool,
    pub finetune: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            self_label: true,
            finetune: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset label in the results table.
    pub dataset: String,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub tasks: SplitCounts,
    /// Share of each evaluation task's positives used as the support set.
    pub support_fraction: f64,
    pub net: NetSettings,
    pub train: TrainSettings,
    pub train_grid: TrainGrid,
    /// Criteria for which a meta-trained model is selected and reported.
    pub selection: Vec<Criterion>,
    pub forest_grid: ForestGrid,
    /// Criterion choosing the shared forest hyperparameters.
    pub forest_selection: Criterion,
    pub self_label_iterations: usize,
    pub shift: ShiftDescriptor,
    pub finetune: FineTuneSettings,
    pub stages: StageToggles,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        let mut train = TrainSettings::default();
        train.episodes.augment = Some(symmetries(&generator));
        ExperimentConfig {
            dataset: "synthetic".into(),
            seed: 0,
            generator,
            tasks: SplitCounts::default(),
            support_fraction: 0.1,
            net: NetSettings::default(),
            train,
            train_grid: TrainGrid::default(),
            selection: vec![Criterion::F1, Criterion::F2],
            forest_grid: ForestGrid::default(),
            forest_selection: Criterion::F1,
            self_label_iterations: DEFAULT_SELF_LABEL_ITERATIONS,
            shift: ShiftDescriptor::default(),
            finetune: FineTuneSettings::default(),
            stages: StageToggles::default(),
        }
    }
}

impl ExperimentConfig {
    /// 5/2/2 small tasks, a tiny network and 5 epochs.
    pub fn smoke() -> Self {
        let generator = GeneratorConfig {
            feature_dim: 6,
            positives_min: 40,
            positives_max: 60,
            ..GeneratorConfig::default()
        };
        ExperimentConfig {
            train: TrainSettings {
                epochs: 5,
                batch_size: 64,
                episodes: EpisodeConfig {
                    min_support: 5,
                    max_support: 20,
                    max_positive_queries: Some(30),
                    augment: Some(symmetries(&generator)),
                    ..EpisodeConfig::default()
                },
                checkpoint_every: 1,
            },
            generator,
            tasks: SplitCounts {
                train: 5,
                validation: 2,
                test: 2,
            },
            net: NetSettings {
                width: 16,
                layers: 3,
                ..NetSettings::default()
            },
            train_grid: TrainGrid {
                learning_rate: vec![1e-3],
                l1: vec![1e-6],
                positive_weight: vec![10.0],
            },
            forest_grid: ForestGrid::single(&ForestConfig {
                n_trees: 20,
                max_depth: Some(10),
                ..ForestConfig::default()
            }),
            self_label_iterations: 3,
            shift: ShiftDescriptor {
                support_size: 20,
                train_negative_ratio: 50.0,
                pool_positives: 20,
                test_positives: 20,
                ..ShiftDescriptor::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if let Some(a) = &self.train.episodes.augment {
            a.validate(self.generator.feature_dim)?;
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::InvalidArgument("support_fraction must be in (0, 1)".into()));
        }
        if self.selection.is_empty() {
            return Err(Error::InvalidArgument("at least one selection criterion is needed".into()));
        }
        if self.train_grid.configs(&self.base_train(0)).is_empty()
            || self.forest_grid.combinations().is_empty()
        {
            return Err(Error::InvalidArgument("hyperparameter grids must not be empty".into()));
        }
        if self.finetune.factors.iter().any(|f| !(*f > 0.0)) || self.finetune.factors.is_empty() {
            return Err(Error::InvalidArgument("fine-tuning factors must be positive".into()));
        }
        self.base_train(0).validate()
    }

    /// Training configuration before the grid fills in learning rate, l1
    /// and class weight.
    pub fn base_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            episodes: self.train.episodes.clone(),
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    /// Reads a `.toml` or `.json` file; missing fields take their defaults.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        let cfg: ExperimentConfig = if is_toml {
            toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
                message: e.message().to_string(),
            })?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
