//! Optional JSON configuration shared by every subcommand.
//!
//! Each subcommand takes `--config FILE`; values read from the file fill in
//! whatever the command line leaves unset, and explicit flags always win.

use std::fs;
use std::path::{Path, PathBuf};

use alcnn_core::model::TrainConfig;
use alcnn_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Union of every tunable the subcommands accept. Unknown keys are rejected
/// so a typo cannot silently fall back to a default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory of the source city (the one with trip records).
    pub source_dir: Option<PathBuf>,
    /// Directory of the target city (no trip records).
    pub target_dir: Option<PathBuf>,
    /// City directory for the single-city stages (ingest, features).
    pub city_dir: Option<PathBuf>,
    /// Directory holding a train run's checkpoint and transform.
    pub model_dir: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    /// Time slots per day (k).
    pub slots: Option<usize>,
    pub days: Option<usize>,
    pub seed: Option<u64>,
    /// Fixed UTC offset in seconds used to split records into days.
    pub utc_offset: Option<i64>,
    /// Smoothing ε for normalization.
    pub eps: Option<f64>,
    /// Pattern acceptance threshold β.
    pub beta: Option<f64>,
    /// Histogram bin count.
    pub bins: Option<usize>,
    pub wavelet: Option<String>,
    /// Latent dimension d′ of the joint PCA.
    pub d_prime: Option<usize>,
    /// Training method: alcnn, lr, or knn.
    pub method: Option<String>,
    /// Ridge regularization λ.
    pub lambda: Option<f64>,
    /// Neighbor count for the KNN baseline.
    pub neighbors: Option<usize>,
    pub poi_categories: Option<usize>,
    pub road_levels: Option<usize>,
    pub sentinel_distance_m: Option<f64>,
    /// Full training configuration; individual flags override its fields.
    pub train: Option<TrainConfig>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<PipelineConfig> {
        let Some(path) = path else { return Ok(PipelineConfig::default()) };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Flag value if given, else config value, else the documented default.
pub fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

/// Like [`pick`] but for values that have no default and must come from
/// somewhere; names the flag in the error.
pub fn require<T>(flag: Option<T>, config: Option<T>, name: &str) -> Result<T> {
    flag.or(config).ok_or_else(|| Error::invalid(format!("missing required value --{name}")))
}
