//! Versioned model persistence.
//!
//! One self-describing JSON file holds everything needed to reproduce
//! predictions: hyperparameters, architecture (including the group
//! registry), class boundaries with their source percentiles,
//! normalization statistics, and every weight tensor. Floats are written
//! in shortest round-trip form, so save/load is bitwise faithful and the
//! same model always serializes to the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::model::{Model, ModelConfig};
use crate::numcore::{ParamSet, Parameter, Tensor};
use crate::ordinal::ClassBoundaries;
use crate::training::Hyperparams;

/// Current artifact format; loaders reject other major versions.
pub const ARTIFACT_FORMAT_VERSION: &str = "1.0";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArtifactFile {
    format_version: String,
    hyperparams: Hyperparams,
    config: ModelConfig,
    boundaries: Vec<u64>,
    percentiles: Vec<f64>,
    normalization: NormStats,
    weights: Vec<WeightEntry>,
}

/// A loaded artifact: the model plus its training provenance.
#[derive(Clone, Debug)]
pub struct LoadedArtifact {
    pub model: Model,
    pub hyperparams: Hyperparams,
    pub percentiles: Vec<f64>,
}

/// Exclusive-writer guard: creates `<path>.lock`, removed on drop.
struct WriteLock {
    path: PathBuf,
}

impl WriteLock {
    fn acquire(artifact_path: &Path) -> Result<WriteLock> {
        let mut lock_path = artifact_path.as_os_str().to_owned();
        lock_path.push(".lock");
        let path = PathBuf::from(lock_path);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WriteLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Artifact(
                format!("another writer holds {}", path.display()),
            )),
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Serialize a model (with its hyperparameters and boundary percentiles)
/// to deterministic JSON bytes.
pub fn to_bytes(model: &Model, hyperparams: &Hyperparams, percentiles: &[f64]) -> Result<Vec<u8>> {
    let weights: Vec<WeightEntry> = model
        .params
        .iter()
        .map(|p| WeightEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect();
    let file = ArtifactFile {
        format_version: ARTIFACT_FORMAT_VERSION.to_string(),
        hyperparams: hyperparams.clone(),
        config: model.config.clone(),
        boundaries: model.boundaries.thresholds().to_vec(),
        percentiles: percentiles.to_vec(),
        normalization: model.normalization.clone(),
        weights,
    };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Write an artifact, holding the writer lock for the duration.
pub fn save(
    model: &Model,
    hyperparams: &Hyperparams,
    percentiles: &[f64],
    path: &Path,
) -> Result<()> {
    let _lock = WriteLock::acquire(path)?;
    let bytes = to_bytes(model, hyperparams, percentiles)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_major(version: &str) -> Result<u32> {
    version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok())
        .ok_or_else(|| Error::Artifact(format!("malformed format version {version:?}")))
}

/// Load an artifact, rejecting unknown major versions.
pub fn load(path: &Path) -> Result<LoadedArtifact> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: ArtifactFile = serde_json::from_str(&raw)?;

    let major = parse_major(&file.format_version)?;
    let supported = parse_major(ARTIFACT_FORMAT_VERSION)?;
    if major != supported {
        return Err(Error::Artifact(format!(
            "artifact format version {} is not supported (expected major {supported})",
            file.format_version
        )));
    }

    let mut params = ParamSet::new();
    for entry in file.weights {
        let tensor = Tensor::new(entry.shape, entry.data)?;
        params.add(Parameter::new(entry.name, tensor))?;
    }
    let boundaries = ClassBoundaries::new(file.boundaries)?;
    let model = Model::from_parts(file.config, boundaries, file.normalization, params)?;
    Ok(LoadedArtifact {
        model,
        hyperparams: file.hyperparams,
        percentiles: file.percentiles,
    })
}
