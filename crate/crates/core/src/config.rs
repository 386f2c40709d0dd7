//! The full pipeline configuration, read from sectioned TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::graph::GraphConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSpace {
    /// Perceptual channels plus weighted spatial coordinates.
    Full,
    /// Perceptual channels only.
    FeaturesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    pub k: usize,
    pub max_iter: usize,
    pub cluster_space: ClusterSpace,
    pub seed: u64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            k: 32,
            max_iter: 100,
            cluster_space: ClusterSpace::Full,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation PLCC improvement;
    /// 0 runs every epoch.
    pub patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            patience: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub feature: FeatureConfig,
    pub clustering: ClusteringConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.feature.validate()?;
        self.graph.validate()?;
        self.model.validate()?;
        if self.clustering.k < 2 {
            return Err(Error::Config("clustering.k must be >= 2".into()));
        }
        if self.clustering.max_iter == 0 {
            return Err(Error::Config("clustering.max_iter must be >= 1".into()));
        }
        let t = &self.training;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config("training.lr must be positive".into()));
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(Error::Config("training.batch_size and training.epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// The settings that determine a cloud's graph.
    pub fn graph_settings(&self) -> GraphSettings {
        GraphSettings {
            feature: self.feature.clone(),
            clustering: self.clustering.clone(),
            graph: self.graph.clone(),
        }
    }
}

/// The graph-determining subset of [`PipelineConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSettings {
    pub feature: FeatureConfig,
    pub clustering: ClusteringConfig,
    pub graph: GraphConfig,
}
