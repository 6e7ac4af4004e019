//! Fine-tuning loop: per-batch presized augmentation, optional mixup,
//! AdamW with separate backbone and head learning rates, and a cosine or
//! constant schedule stepped per batch.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dermoscan_core::augment::{batch_augment, validation_transform, AugmentationPolicy};
use dermoscan_core::metrics::{threshold_grid, threshold_sweep, PredictionSet};
use dermoscan_core::mixup::mixup;
use dermoscan_core::schedule::cosine_lr;
use dermoscan_core::split::{SplitManifest, DEFAULT_SEED};
use dermoscan_core::{LesionLabel, Taxonomy, NUM_CLASSES};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, OptimizerConfig};
use tch::{Kind, Tensor};

use crate::checkpoint::{save_checkpoint, save_sweep, CheckpointMeta};
use crate::data::{to_batch, StagedImages, DEFAULT_CACHE_BYTES};
use crate::error::{read_error, write_error, Error, Result};
use crate::evaluate::{predict, scored_against};
use crate::ingest::Corpus;
use crate::zoo::{build_model, ArchitectureId, ModelSpec, Network, BACKBONE_GROUP, HEAD_GROUP};

pub const LOG_FILE: &str = "epochs.csv";
pub const CONFIG_FILE: &str = "train_config.json";
pub const VALID_PREDICTIONS_FILE: &str = "valid_predictions.json";
pub const SWEEP_GRID_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchitectureId,
    pub epochs: usize,
    pub frozen_epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub schedule: Schedule,
    pub policy: AugmentationPolicy,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub weight_decay: f64,
    pub pretrained: bool,
    pub weights_dir: Option<PathBuf>,
    pub head_dropout: f64,
    /// Weight each item's loss by the inverse frequency of its class.
    pub class_weighting: bool,
    pub model_id: Option<String>,
    /// Split manifest and class-folder corpus, for config-file driven runs.
    pub manifest: Option<PathBuf>,
    pub corpus_dir: Option<PathBuf>,
    pub cache_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchitectureId::Resnet50,
            epochs: 20,
            frozen_epochs: 1,
            batch_size: 64,
            lr_head: 1e-3,
            lr_backbone: 1e-5,
            schedule: Schedule::Cosine,
            policy: AugmentationPolicy::default(),
            seed: DEFAULT_SEED,
            checkpoint_dir: PathBuf::from("checkpoints/model"),
            weight_decay: 1e-2,
            pretrained: true,
            weights_dir: None,
            head_dropout: 0.25,
            class_weighting: false,
            model_id: None,
            manifest: None,
            corpus_dir: None,
            cache_bytes: DEFAULT_CACHE_BYTES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_head > 0.0 && self.lr_backbone > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_backbone > self.lr_head {
            return bad(format!("lr_backbone {} exceeds lr_head {}", self.lr_backbone, self.lr_head));
        }
        if self.frozen_epochs > self.epochs {
            return bad(format!("frozen_epochs {} exceeds epochs {}", self.frozen_epochs, self.epochs));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        self.policy.validate()?;
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            arch: self.arch,
            num_classes: NUM_CLASSES,
            pretrained: self.pretrained,
            head_dropout: self.head_dropout,
            weights_dir: self.weights_dir.clone(),
        }
    }

    pub fn model_id(&self) -> String {
        self.model_id.clone().unwrap_or_else(|| self.arch.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(read_error(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Head learning rate at a global step.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(step, total_steps.max(1), self.lr_head, 0.0),
            Schedule::Constant => self.lr_head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    pub lr_head: f64,
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub logs: Vec<EpochLog>,
    /// Epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub artifacts: Vec<PathBuf>,
}

/// Number of optimizer steps per epoch; the ragged last batch is dropped
/// once the training set holds at least one full batch.
pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    if n_train == 0 {
        0
    } else if n_train >= batch_size {
        n_train / batch_size
    } else {
        1
    }
}

fn class_weights(labels: &[LesionLabel]) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        counts[l.index()] += 1;
    }
    let present = counts.iter().filter(|c| **c > 0).count().max(1) as f64;
    let inv: Vec<f64> = counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
    let mean = inv.iter().sum::<f64>() / present;
    let mut w = [0.0; NUM_CLASSES];
    for (i, v) in inv.iter().enumerate() {
        w[i] = v / mean;
    }
    w
}

fn label_tensor(labels: &[LesionLabel]) -> Tensor {
    let idx: Vec<i64> = labels.iter().map(|l| l.index() as i64).collect();
    Tensor::from_slice(&idx)
}

/// Mean over the batch of `w_i * (lam_i * CE(a_i) + (1 - lam_i) * CE(b_i))`.
fn batch_loss(logits: &Tensor, a: &[LesionLabel], b: &[LesionLabel], lam: &[f64], weights: Option<&[f64; NUM_CLASSES]>) -> Tensor {
    let logp = logits.log_softmax(-1, Kind::Float);
    let ce_a = -logp.gather(1, &label_tensor(a).unsqueeze(1), false).squeeze_dim(1);
    let ce_b = -logp.gather(1, &label_tensor(b).unsqueeze(1), false).squeeze_dim(1);
    let lam_t = Tensor::from_slice(&lam.iter().map(|v| *v as f32).collect::<Vec<_>>());
    let mut per_item: Tensor = ce_a * &lam_t + ce_b * (lam_t.neg() + 1.0);
    if let Some(w) = weights {
        let wi: Vec<f32> = (0..a.len())
            .map(|i| (lam[i] * w[a[i].index()] + (1.0 - lam[i]) * w[b[i].index()]) as f32)
            .collect();
        per_item = per_item * Tensor::from_slice(&wi);
    }
    per_item.mean(Kind::Float)
}

/// Mean validation cross-entropy and accuracy, computed in inference mode.
fn validate(
    net: &Network,
    images: &mut StagedImages,
    ids: &[String],
    policy: &AugmentationPolicy,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in ids.chunks(batch_size.max(1)) {
        let staged = images.get_many(chunk)?;
        let views = staged.iter().map(|img| validation_transform(img, policy)).collect::<dermoscan_core::Result<Vec<_>>>()?;
        let labels = chunk.iter().map(|id| images.label(id)).collect::<Result<Vec<_>>>()?;
        let logits = tch::no_grad(|| net.forward_t(&to_batch(&views), false));
        let logp = logits.log_softmax(-1, Kind::Double);
        let nll = -logp.gather(1, &label_tensor(&labels).unsqueeze(1), false);
        loss_sum += nll.sum(Kind::Double).double_value(&[]);
        let pred = logits.argmax(-1, false);
        correct += pred.eq_tensor(&label_tensor(&labels)).sum(Kind::Int64).int64_value(&[]) as usize;
    }
    let n = ids.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(write_error(path))?;
    writeln!(
        f,
        "{},{},{},{},{},{}",
        log.epoch, log.train_loss, log.valid_loss, log.valid_accuracy, log.lr_head, log.wall_time
    )
    .map_err(write_error(path))
}

/// Train on `manifest.train_ids`, keeping the weights with the lowest
/// validation loss in `config.checkpoint_dir`.
pub fn train(config: &TrainConfig, manifest: &SplitManifest, corpus: &Corpus) -> Result<TrainOutcome> {
    config.validate()?;
    corpus.require(manifest)?;
    if config.epochs > 0 && (manifest.train_ids.is_empty() || manifest.valid_ids.is_empty()) {
        return Err(Error::InvalidConfig("training needs non-empty train and validation splits".into()));
    }
    let dir = config.checkpoint_dir.clone();
    fs::create_dir_all(&dir).map_err(write_error(&dir))?;
    let mut artifacts = Vec::new();

    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, serde_json::to_string_pretty(config)? + "\n").map_err(write_error(&config_path))?;
    artifacts.push(config_path);
    let log_path = dir.join(LOG_FILE);
    fs::write(&log_path, "epoch,train_loss,valid_loss,valid_accuracy,lr_head,wall_time\n").map_err(write_error(&log_path))?;
    artifacts.push(log_path.clone());

    tch::manual_seed(config.seed as i64);
    let spec = config.model_spec();
    let net = build_model(&spec)?;
    let policy = &config.policy;
    let meta = CheckpointMeta::new(config.model_id(), &spec, policy);
    let mut images = StagedImages::new(corpus, policy.presize_to, config.cache_bytes);

    let train_labels = manifest.train_ids.iter().map(|id| images.label(id)).collect::<Result<Vec<_>>>()?;
    let weights = config.class_weighting.then(|| class_weights(&train_labels));

    let mut opt = nn::AdamW {
        wd: config.weight_decay,
        ..Default::default()
    }
    .build(net.var_store(), config.lr_head)?;

    let steps = steps_per_epoch(manifest.train_ids.len(), config.batch_size);
    let total_steps = config.epochs * steps;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..manifest.train_ids.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize)> = None;
    let started = Instant::now();

    if config.epochs == 0 {
        save_checkpoint(&dir, &net, &meta)?;
    }

    for epoch in 0..config.epochs {
        let frozen = epoch < config.frozen_epochs;
        net.set_backbone_trainable(!frozen);
        order.shuffle(&mut rng);
        let lr_epoch = config.lr_at(epoch * steps, total_steps);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;

        for s in 0..steps {
            let step = epoch * steps + s;
            let lr = config.lr_at(step, total_steps);
            opt.set_lr_group(HEAD_GROUP, lr);
            opt.set_lr_group(BACKBONE_GROUP, lr * config.lr_backbone / config.lr_head);

            let end = ((s + 1) * config.batch_size).min(order.len());
            let idx = &order[s * config.batch_size..end];
            let ids: Vec<String> = idx.iter().map(|&i| manifest.train_ids[i].clone()).collect();
            let labels: Vec<LesionLabel> = idx.iter().map(|&i| train_labels[i]).collect();
            let staged = images.get_many(&ids)?;
            let augmented = batch_augment(&staged, policy, &mut rng)?;
            let (batch, label_b, lam) = if policy.mixup_alpha > 0.0 && augmented.len() >= 2 {
                let mixed = mixup(&augmented, &labels, policy.mixup_alpha, &mut rng)?;
                (mixed.images, mixed.label_b, mixed.lam)
            } else {
                (augmented, labels.clone(), vec![1.0; labels.len()])
            };

            let logits = net.forward_t(&to_batch(&batch), true);
            let loss = batch_loss(&logits, &labels, &label_b, &lam, weights.as_ref());
            let value = loss.double_value(&[]);
            if !value.is_finite() {
                return Err(Error::DivergedLoss { epoch, logs });
            }
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += value * labels.len() as f64;
            seen += labels.len();
        }

        let (valid_loss, valid_accuracy) = validate(&net, &mut images, &manifest.valid_ids, policy, config.batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            valid_loss,
            valid_accuracy,
            lr_head: lr_epoch,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.4} valid_loss {:.4} valid_accuracy {:.4}{}",
            log.train_loss,
            log.valid_loss,
            log.valid_accuracy,
            if frozen { " (backbone frozen)" } else { "" }
        );
        append_log(&log_path, &log)?;
        if !valid_loss.is_finite() {
            logs.push(log);
            return Err(Error::DivergedLoss { epoch, logs });
        }
        if best.map_or(true, |(l, _)| valid_loss < l) {
            best = Some((valid_loss, epoch));
            save_checkpoint(&dir, &net, &meta)?;
        }
        logs.push(log);
    }
    net.set_backbone_trainable(true);
    artifacts.push(dir.join(crate::checkpoint::WEIGHTS_FILE));
    artifacts.push(dir.join(crate::checkpoint::META_FILE));

    if !manifest.valid_ids.is_empty() {
        let mut best_net = build_model(&ModelSpec { pretrained: false, ..spec })?;
        best_net.load(&dir.join(crate::checkpoint::WEIGHTS_FILE))?;
        let valid = manifest
            .valid_ids
            .iter()
            .map(|id| Ok((id.clone(), images.get(id)?)))
            .collect::<Result<Vec<_>>>()?;
        let preds = predict(&best_net, &valid, policy, &meta.model_id)?;
        let truths = corpus.labels();
        let sweep = threshold_sweep(&scored_against(&preds, &truths, &Taxonomy::default())?, &threshold_grid(SWEEP_GRID_STEP))?;
        save_sweep(&dir, &sweep)?;
        artifacts.push(dir.join(crate::checkpoint::SWEEP_FILE));
        let pred_path = dir.join(VALID_PREDICTIONS_FILE);
        write_predictions(&preds, &pred_path)?;
        artifacts.push(pred_path);
    }

    Ok(TrainOutcome {
        checkpoint_dir: dir,
        logs,
        best_epoch: best.map(|(_, e)| e),
        artifacts,
    })
}

pub fn write_predictions(preds: &PredictionSet, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(preds)? + "\n").map_err(write_error(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_drop_the_ragged_batch() {
        assert_eq!(steps_per_epoch(64, 8), 8);
        assert_eq!(steps_per_epoch(70, 8), 8);
        assert_eq!(steps_per_epoch(5, 8), 1);
        assert_eq!(steps_per_epoch(0, 8), 0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 64);
        assert_eq!((c.lr_head, c.lr_backbone, c.frozen_epochs, c.epochs), (1e-3, 1e-5, 1, 20));
        c.validate().unwrap();
        let inverted = TrainConfig { lr_backbone: 1e-2, ..c.clone() };
        assert!(inverted.validate().is_err());
        let overfrozen = TrainConfig { frozen_epochs: 21, ..c };
        assert!(overfrozen.validate().is_err());
    }

    #[test]
    fn partial_config_json_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"arch": "resnet18", "epochs": 3, "policy": {"mixup_alpha": 0}}"#).unwrap();
        assert_eq!(c.arch, ArchitectureId::Resnet18);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.policy.mixup_alpha, 0.0);
        assert_eq!(c.policy.presize_to, 460);
    }

    #[test]
    fn class_weights_average_to_one() {
        let labels = [LesionLabel::Nv, LesionLabel::Nv, LesionLabel::Nv, LesionLabel::Mel];
        let w = class_weights(&labels);
        assert!((w[LesionLabel::Mel.index()] - 1.5).abs() < 1e-12);
        assert!((w[LesionLabel::Nv.index()] - 0.5).abs() < 1e-12);
        assert_eq!(w[LesionLabel::Df.index()], 0.0);
    }

    #[test]
    fn batch_loss_matches_core_mixup_loss() {
        let logits_v: Vec<f32> = (0..14).map(|i| ((i * 37 % 11) as f32 - 5.0) / 3.0).collect();
        let logits = Tensor::from_slice(&logits_v).reshape([2, 7]);
        let a = [LesionLabel::Akiec, LesionLabel::Vasc];
        let b = [LesionLabel::Mel, LesionLabel::Vasc];
        let lam = [0.3, 0.8];
        let got = batch_loss(&logits, &a, &b, &lam, None).double_value(&[]);
        let row = |r: usize| logits_v[r * 7..(r + 1) * 7].iter().map(|v| *v as f64).collect::<Vec<_>>();
        let expected = (dermoscan_core::loss::mixup_loss(&row(0), 0, 4, 0.3).unwrap()
            + dermoscan_core::loss::mixup_loss(&row(1), 6, 6, 0.8).unwrap())
            / 2.0;
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }
}
