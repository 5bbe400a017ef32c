//! Dataset schema, synthetic data generation, checkpoint serialization and
//! exports of matchings and 3D geometry.
//!
//! The dataset format is documented in `docs/dataset_format.md` at the
//! repository root, together with the checkpoint layout and the metrics log
//! line format.

mod checkpoint;
mod export;
mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, NamedTensor};
pub use export::{
    export_geometry, export_matchings, load_matchings, DeformedInstanceGeometry, MatchingsFile,
};
pub use synthetic::generate_synthetic;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid dataset: {0}")]
    Invariant(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: String, supported: String },
    #[error("corrupt file {path}: {reason}")]
    Integrity { path: String, reason: String },
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Train/test split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Declared category: name, universe size, and (for synthetic data) the
/// ground-truth base shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryDecl {
    pub name: String,
    pub universe_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_points: Option<Vec<[f64; 3]>>,
}

/// One image's keypoints with category, split and optional ground-truth
/// universe labels. Occluded points are simply absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointInstance {
    pub id: String,
    pub category: String,
    pub split: Split,
    pub keypoints: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub universe_labels: Option<Vec<usize>>,
}

/// The on-disk dataset: categories plus instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub categories: Vec<CategoryDecl>,
    pub instances: Vec<KeypointInstance>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    /// Checks every schema invariant, naming the offending instance or
    /// category in the error.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.version != MANIFEST_VERSION {
            return Err(DataError::VersionMismatch {
                found: self.version.to_string(),
                supported: MANIFEST_VERSION.to_string(),
            });
        }
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for cat in &self.categories {
            if sizes.insert(cat.name.as_str(), cat.universe_size).is_some() {
                return Err(DataError::Invariant(format!(
                    "duplicate category name '{}'",
                    cat.name
                )));
            }
            if cat.universe_size == 0 {
                return Err(DataError::Invariant(format!(
                    "category '{}' declares an empty universe",
                    cat.name
                )));
            }
            if let Some(gt) = &cat.gt_points {
                if gt.len() != cat.universe_size {
                    return Err(DataError::Invariant(format!(
                        "category '{}' has {} ground-truth points for universe size {}",
                        cat.name,
                        gt.len(),
                        cat.universe_size
                    )));
                }
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id.as_str()) {
                return Err(DataError::Invariant(format!(
                    "duplicate instance id '{}'",
                    inst.id
                )));
            }
            let Some(&d) = sizes.get(inst.category.as_str()) else {
                return Err(DataError::Invariant(format!(
                    "instance '{}' references unknown category '{}'",
                    inst.id, inst.category
                )));
            };
            if inst.keypoints.is_empty() {
                return Err(DataError::Invariant(format!(
                    "instance '{}' has no keypoints",
                    inst.id
                )));
            }
            if inst
                .keypoints
                .iter()
                .any(|p| !p[0].is_finite() || !p[1].is_finite())
            {
                return Err(DataError::Invariant(format!(
                    "instance '{}' has a non-finite keypoint",
                    inst.id
                )));
            }
            if let Some(labels) = &inst.universe_labels {
                if labels.len() != inst.keypoints.len() {
                    return Err(DataError::Invariant(format!(
                        "instance '{}' has {} labels for {} keypoints",
                        inst.id,
                        labels.len(),
                        inst.keypoints.len()
                    )));
                }
                let mut seen = vec![false; d];
                for &l in labels {
                    if l >= d {
                        return Err(DataError::Invariant(format!(
                            "instance '{}' label {} exceeds universe size {}",
                            inst.id, l, d
                        )));
                    }
                    if seen[l] {
                        return Err(DataError::Invariant(format!(
                            "instance '{}' repeats universe label {}",
                            inst.id, l
                        )));
                    }
                    seen[l] = true;
                }
            }
        }
        Ok(())
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    /// `(name, universe_size)` list in declaration order.
    pub fn category_sizes(&self) -> Vec<(String, usize)> {
        self.categories
            .iter()
            .map(|c| (c.name.clone(), c.universe_size))
            .collect()
    }
}

/// Loads and validates a dataset manifest from JSON.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    manifest.validate()?;
    Ok(manifest)
}

/// Serializes a manifest as pretty-printed JSON.
pub fn save_dataset(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Configuration of the synthetic dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub categories: usize,
    /// Universe points per category.
    pub points_per_category: usize,
    /// Training instances per category.
    pub train_instances: usize,
    /// Test instances per category.
    pub test_instances: usize,
    /// Scale of the per-instance polynomial deformation field.
    pub deformation_amplitude: f64,
    /// Keypoint jitter standard deviation in normalized units (relative to
    /// the projected cloud's half-extent).
    pub noise_sigma: f64,
    /// Independent probability that a keypoint is occluded.
    pub occlusion_probability: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.categories == 0 {
            return Err(DataError::Config("need at least one category".into()));
        }
        if self.points_per_category < 4 {
            return Err(DataError::Config(format!(
                "need at least 4 universe points, got {}",
                self.points_per_category
            )));
        }
        if self.train_instances == 0 {
            return Err(DataError::Config("need at least one train instance".into()));
        }
        if !(0.0..1.0).contains(&self.occlusion_probability) {
            return Err(DataError::Config(format!(
                "occlusion probability must be in [0, 1), got {}",
                self.occlusion_probability
            )));
        }
        let expected_visible =
            self.points_per_category as f64 * (1.0 - self.occlusion_probability);
        if expected_visible < 4.0 {
            return Err(DataError::Config(format!(
                "expected visible points {expected_visible:.2} fall below the floor of 4"
            )));
        }
        if self.deformation_amplitude < 0.0 || self.noise_sigma < 0.0 {
            return Err(DataError::Config(
                "amplitude and noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}
