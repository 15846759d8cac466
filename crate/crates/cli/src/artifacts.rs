//! JSON artifacts exchanged between pipeline stages.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use proptok::cache::{Accuracies, CacheConfig, CacheEpoch};
use proptok::contrast::{ContrastConfig, EpochStats};
use proptok::datastore::{PlantRecord, SynthConfig};
use proptok::mpg::MpgConfig;
use proptok::propmine::PropertyAssignment;
use proptok::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const PLANT_FILE: &str = "plant.json";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const CENTROIDS_FILE: &str = "centroids.pct1";
pub const ASSIGNMENT_FILE: &str = "assignment.json";
pub const MPG_DIR: &str = "mpg";
pub const TRAIN_MPG_FILE: &str = "train_mpg.json";
pub const CACHE_DIR: &str = "cache";
pub const TRAIN_CACHE_FILE: &str = "train_cache.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct PlantFile {
    pub format_version: u32,
    pub synth: SynthConfig,
    pub plant: PlantRecord,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClustersFile {
    pub format_version: u32,
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
    /// Cluster id of every pooled description, in pool order.
    pub assignment: Vec<usize>,
    pub centroids: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AssignmentFile {
    pub format_version: u32,
    pub k: usize,
    pub fallbacks: usize,
    pub assignment: PropertyAssignment,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainMpgFile {
    pub format_version: u32,
    pub mpg: MpgConfig,
    pub contrast: ContrastConfig,
    pub param_count: usize,
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainCacheFile {
    pub format_version: u32,
    pub config: CacheConfig,
    pub epochs: Vec<CacheEpoch>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataEcho {
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "N")]
    pub n_classes: usize,
    #[serde(rename = "K")]
    pub shots: usize,
    #[serde(rename = "M")]
    pub props: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterEcho {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEcho {
    pub beta_s: f64,
    pub logit_scale: f64,
    /// Present once `train-cache` has run.
    pub training: Option<CacheConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub data: DataEcho,
    pub clusters: ClusterEcho,
    pub mpg: MpgConfig,
    pub contrast: ContrastConfig,
    pub cache: CacheEcho,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub accuracies: Accuracies,
    pub alpha: f64,
    pub beta: f64,
    pub trained: bool,
    /// Per slot: mean angle (degrees) to the other slots' tokens over queries.
    pub slot_angles_deg: Vec<f64>,
    /// Share of (support, slot) pairs matched to their planted property;
    /// only for synthetic bundles with a plant record.
    pub slot_alignment: Option<f64>,
    pub n_queries: usize,
    pub fallbacks: usize,
    pub config: ConfigEcho,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: T = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    Ok(value)
}

/// Removes stage outputs that an upstream rerun has made stale.
pub fn invalidate(run: &Path, names: &[&str]) -> Result<()> {
    for name in names {
        let p: PathBuf = run.join(name);
        let res = if p.is_dir() {
            fs::remove_dir_all(&p)
        } else if p.exists() {
            fs::remove_file(&p)
        } else {
            Ok(())
        };
        res.map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Records a stage's wall-clock seconds in `timings.json`.
pub fn record_timing(run: &Path, stage: &str, seconds: f64) -> Result<()> {
    let path = run.join(TIMINGS_FILE);
    let mut map: serde_json::Map<String, serde_json::Value> = if path.exists() {
        read_json(&path).unwrap_or_default()
    } else {
        serde_json::Map::new()
    };
    map.insert(stage.to_string(), serde_json::json!(seconds));
    write_json(&path, &map)
}
