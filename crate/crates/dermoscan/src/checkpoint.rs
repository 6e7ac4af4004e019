//! Checkpoint directories: `model.safetensors` with every variable,
//! `model.json` describing how to rebuild and feed the network, and an
//! optional `sweep.json` with validation operating points.

use std::fs;
use std::path::{Path, PathBuf};

use dermoscan_core::augment::AugmentationPolicy;
use dermoscan_core::image::CHANNELS;
use dermoscan_core::metrics::ThresholdSweepResult;
use dermoscan_core::{LesionLabel, Taxonomy, LABEL_ORDER};
use serde::{Deserialize, Serialize};

use crate::error::{write_error, Error, Result};
use crate::zoo::{build_model, ArchitectureId, ModelSpec, Network};

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const META_FILE: &str = "model.json";
pub const SWEEP_FILE: &str = "sweep.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub arch: ArchitectureId,
    pub num_classes: usize,
    pub normalize_mean: [f32; CHANNELS],
    pub normalize_std: [f32; CHANNELS],
    pub label_order: Vec<LesionLabel>,
    pub presize_to: usize,
    pub final_size: usize,
    pub head_dropout: f64,
    /// Transforms used in training, reused for test-time augmentation.
    #[serde(default)]
    pub policy: AugmentationPolicy,
    #[serde(default)]
    pub taxonomy: Taxonomy,
}

impl CheckpointMeta {
    pub fn new(model_id: impl Into<String>, spec: &ModelSpec, policy: &AugmentationPolicy) -> Self {
        Self {
            model_id: model_id.into(),
            arch: spec.arch,
            num_classes: spec.num_classes,
            normalize_mean: policy.normalize_mean,
            normalize_std: policy.normalize_std,
            label_order: LABEL_ORDER.to_vec(),
            presize_to: policy.presize_to,
            final_size: policy.final_size,
            head_dropout: spec.head_dropout,
            policy: policy.clone(),
            taxonomy: Taxonomy::default(),
        }
    }

    /// The training policy with the sidecar's sizes and normalization applied.
    pub fn effective_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            presize_to: self.presize_to,
            final_size: self.final_size,
            normalize_mean: self.normalize_mean,
            normalize_std: self.normalize_std,
            ..self.policy.clone()
        }
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec {
            head_dropout: self.head_dropout,
            ..ModelSpec::new(self.arch, self.num_classes, false)
        }
    }
}

pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
    pub network: Network,
    pub sweep: Option<ThresholdSweepResult>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").map_err(write_error(path))
}

pub fn save_checkpoint(dir: &Path, network: &Network, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(write_error(dir))?;
    network.save(&dir.join(WEIGHTS_FILE))?;
    write_json(meta, &dir.join(META_FILE))
}

pub fn save_sweep(dir: &Path, sweep: &ThresholdSweepResult) -> Result<()> {
    write_json(sweep, &dir.join(SWEEP_FILE))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CheckpointCorrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| corrupt(&path, e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    if meta.num_classes == LABEL_ORDER.len() && meta.label_order != LABEL_ORDER {
        return Err(corrupt(&path, "label_order differs from akiec, bcc, bkl, df, mel, nv, vasc"));
    }
    if meta.label_order.len() != meta.num_classes {
        return Err(corrupt(&path, "label_order length differs from num_classes"));
    }
    meta.effective_policy().validate().map_err(|e| corrupt(&path, e.to_string()))?;
    Ok(meta)
}

/// Load the sweep if present, rejecting one that violates the monotonicity
/// invariants.
pub fn read_sweep(dir: &Path) -> Result<Option<ThresholdSweepResult>> {
    let path = dir.join(SWEEP_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| corrupt(&path, e.to_string()))?;
    let sweep: ThresholdSweepResult = serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    if !sweep.is_monotone() {
        return Err(corrupt(&path, "operating points are not monotone in the threshold"));
    }
    Ok(Some(sweep))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(corrupt(dir, "checkpoint directory not found"));
    }
    let meta = read_meta(dir)?;
    let mut network = build_model(&meta.spec())?;
    network.load(&dir.join(WEIGHTS_FILE))?;
    let sweep = read_sweep(dir)?;
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        meta,
        network,
        sweep,
    })
}
