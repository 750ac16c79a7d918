//! On-disk layout of a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lto_core::data::sha256_hex;
use lto_core::lto::Checkpoint;
use lto_core::models::ModelParams;
use lto_core::pipeline::ExperimentConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const TIMING: &str = "timing.json";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: usize,
    /// Relative to the run directory.
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEntry {
    pub step: usize,
    pub objective: f64,
}

/// Everything needed to replay an obstruction run. Wall-clock timings live
/// in a separate file so this one stays byte-identical on replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub pretrain_accuracy: f64,
    pub checkpoints: Vec<CheckpointEntry>,
    pub objectives: Vec<ObjectiveEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub beta: f64,
    pub drop_ratio: Option<f64>,
    pub selected_step: Option<usize>,
    pub delta_r: Option<f64>,
    pub delta_rp: Option<f64>,
    /// Why the ratio is missing, when it is.
    pub undefined: Option<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text.as_bytes())
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

pub fn checkpoint_file(step: usize) -> String {
    format!("checkpoints/step_{step:06}.bin")
}

pub fn save_checkpoints(dir: &Path, checkpoints: &[Checkpoint]) -> Result<Vec<CheckpointEntry>> {
    checkpoints
        .iter()
        .map(|c| {
            let bytes = ModelParams::backbone_only(c.theta.clone()).to_bytes();
            let file = checkpoint_file(c.step);
            write(&dir.join(&file), &bytes)?;
            Ok(CheckpointEntry {
                step: c.step,
                file,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

/// Loads and verifies every checkpoint the manifest lists.
pub fn load_checkpoints(dir: &Path, manifest: &Manifest) -> Result<Vec<Checkpoint>> {
    if manifest.checkpoints.is_empty() {
        bail!("manifest in {} lists no checkpoints", dir.display());
    }
    manifest
        .checkpoints
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            let bytes = fs::read(&path).with_context(|| format!("missing checkpoint {}", path.display()))?;
            if sha256_hex(&bytes) != e.sha256 {
                bail!("checkpoint {} does not match its recorded digest", path.display());
            }
            let params = ModelParams::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
            Ok(Checkpoint {
                step: e.step,
                theta: params.theta,
            })
        })
        .collect()
}
