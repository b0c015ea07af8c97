//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Normalization, DEFAULT_MAX_ROWS};
use crate::generate::GenerationConfig;
use crate::score::PreprocessConfig;
use crate::twin::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub composer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub max_rows: usize,
    pub normalization: Normalization,
    pub svg_width: u32,
    pub svg_height: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { max_rows: DEFAULT_MAX_ROWS, normalization: Normalization::MinMax, svg_width: 900, svg_height: 600 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub generate: GenerationConfig,
    pub features: FeatureConfig,
}

pub fn parse_config(bytes: &[u8], path: &Path) -> Result<PipelineConfig, ConfigError> {
    serde_json::from_slice(bytes).map_err(|source| ConfigError::Json { path: path.to_path_buf(), source })
}

/// Reads a JSON config. Absent keys take their defaults; unknown keys fail.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let bytes = std::fs::read(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&bytes, path)
}
