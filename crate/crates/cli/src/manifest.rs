use std::fs;
use std::path::Path;

use iffnn::interpret::AccuracyAtN;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetDigests;
use crate::error::CliError;

pub const TOOL_VERSION: &str = concat!("iffnn ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";

/// An output file, named relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

impl FileRef {
    pub fn of(dir: &Path, name: &str) -> Result<Self, CliError> {
        Ok(Self {
            path: name.to_string(),
            sha256: file_digest(&dir.join(name))?,
        })
    }
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Parameter initialisation and training shuffles.
    pub run: u64,
    /// Train / validation split, when the run made one.
    pub valid_split: Option<u64>,
}

/// Everything needed to re-execute a training run and check its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Canonical config text.
    pub config: String,
    pub seeds: Seeds,
    pub model: String,
    /// Canonical model spec text.
    pub model_spec: String,
    pub param_count: usize,
    pub dataset: DatasetDigests,
    pub epochs_run: usize,
    pub selected_epoch: usize,
    pub valid_accuracy: f64,
    pub test_accuracy: f64,
    /// Test-split Accuracy@N, when ground truth and importance exist.
    pub accuracy_at_n: Option<AccuracyAtN>,
    pub checkpoint: FileRef,
    pub history: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InbenManifest {
    pub tool_version: String,
    pub command: String,
    pub config: String,
    pub spec_seed: u64,
    pub data_seed: u64,
    /// Bernoulli density after calibration.
    pub density: f64,
    pub sizes: [usize; 3],
    pub dataset: FileRef,
    pub spec: FileRef,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn read_run_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("{} is not a training manifest: {e}", path.display())))?;
    if m.command != "train" {
        return Err(CliError::data(format!("{} is not a training manifest", path.display())));
    }
    Ok(m)
}
