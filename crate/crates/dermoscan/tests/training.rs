mod common;

use std::fs;

use dermoscan::checkpoint::{load_checkpoint, read_sweep};
use dermoscan::ingest::Corpus;
use dermoscan::train::{steps_per_epoch, train, Schedule, TrainConfig, LOG_FILE};
use dermoscan::zoo::{build_model, ArchitectureId};
use dermoscan::Error;
use dermoscan_core::schedule::cosine_lr;
use dermoscan_core::split::SplitManifest;

struct Fixture {
    dir: tempfile::TempDir,
    corpus: Corpus,
    manifest: SplitManifest,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    let train_items = common::write_corpus(&root, &[2; 7], 48, 0);
    let valid_items = common::write_corpus(&root, &[1; 7], 48, 500);
    let mut manifest = SplitManifest {
        seed: 1,
        valid_fraction: 1.0 / 3.0,
        train_ids: train_items.into_iter().map(|(id, _)| id).collect(),
        valid_ids: valid_items.into_iter().map(|(id, _)| id).collect(),
    };
    manifest.train_ids.sort();
    manifest.valid_ids.sort();
    Fixture {
        corpus: Corpus::scan(&root).unwrap(),
        manifest,
        dir,
    }
}

fn small_config(fx: &Fixture, name: &str) -> TrainConfig {
    TrainConfig {
        arch: ArchitectureId::Resnet18,
        epochs: 3,
        frozen_epochs: 1,
        batch_size: 4,
        pretrained: false,
        policy: common::small_policy(48, 32),
        checkpoint_dir: fx.dir.path().join(name),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_saves_the_fresh_model() {
    let fx = fixture();
    let config = TrainConfig { epochs: 0, frozen_epochs: 0, ..small_config(&fx, "zero") };
    let outcome = train(&config, &fx.manifest, &fx.corpus).unwrap();
    assert!(outcome.logs.is_empty());
    assert_eq!(outcome.best_epoch, None);
    tch::manual_seed(config.seed as i64);
    let fresh = build_model(&config.model_spec()).unwrap();
    let saved = load_checkpoint(&config.checkpoint_dir).unwrap();
    let a = fresh.var_store().variables();
    let b = saved.network.var_store().variables();
    assert_eq!(a.len(), b.len());
    for (name, t) in &a {
        assert!(t.equal(&b[name]), "{name} differs");
    }
}

#[test]
fn logs_trace_the_cosine_schedule() {
    let fx = fixture();
    let config = small_config(&fx, "cosine");
    let outcome = train(&config, &fx.manifest, &fx.corpus).unwrap();
    assert_eq!(outcome.logs.len(), config.epochs);
    let steps = steps_per_epoch(fx.manifest.train_ids.len(), config.batch_size);
    let total = steps * config.epochs;
    for log in &outcome.logs {
        let expected = cosine_lr(log.epoch * steps, total, config.lr_head, 0.0);
        assert!((log.lr_head - expected).abs() < 1e-9, "epoch {}: {} vs {expected}", log.epoch, log.lr_head);
        assert!(log.train_loss.is_finite() && log.valid_loss.is_finite());
        assert!((0.0..=1.0).contains(&log.valid_accuracy));
    }
    let csv = fs::read_to_string(config.checkpoint_dir.join(LOG_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,valid_loss,valid_accuracy,lr_head,wall_time"));
    assert_eq!(lines.count(), config.epochs);

    let best = outcome.best_epoch.unwrap();
    let best_loss = outcome.logs[best].valid_loss;
    assert!(outcome.logs.iter().all(|l| l.valid_loss >= best_loss));
    let sweep = read_sweep(&config.checkpoint_dir).unwrap().expect("sweep bundled");
    assert!(sweep.is_monotone());
    assert_eq!(sweep.points.len(), 101);
}

#[test]
fn constant_schedule_keeps_the_rate() {
    let fx = fixture();
    let config = TrainConfig {
        epochs: 2,
        schedule: Schedule::Constant,
        ..small_config(&fx, "constant")
    };
    let outcome = train(&config, &fx.manifest, &fx.corpus).unwrap();
    assert!(outcome.logs.iter().all(|l| l.lr_head == config.lr_head));
}

#[test]
fn missing_images_are_reported() {
    let fx = fixture();
    let mut manifest = fx.manifest.clone();
    manifest.valid_ids.push("ISIC_9999999".into());
    match train(&small_config(&fx, "missing"), &manifest, &fx.corpus) {
        Err(Error::CorpusIncomplete(ids)) => assert_eq!(ids, ["ISIC_9999999"]),
        other => panic!("expected CorpusIncomplete, got {:?}", other.err()),
    }
}

#[test]
fn exploding_learning_rate_diverges_with_partial_logs() {
    let fx = fixture();
    let config = TrainConfig {
        epochs: 3,
        frozen_epochs: 0,
        lr_head: 1e12,
        lr_backbone: 1e12,
        ..small_config(&fx, "diverge")
    };
    match train(&config, &fx.manifest, &fx.corpus) {
        Err(Error::DivergedLoss { epoch, logs }) => assert_eq!(logs.len(), epoch),
        other => panic!("expected DivergedLoss, got {:?}", other.map(|o| o.logs)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let fx = fixture();
    let config = TrainConfig { lr_backbone: 1.0, ..small_config(&fx, "bad") };
    assert!(matches!(train(&config, &fx.manifest, &fx.corpus), Err(Error::InvalidConfig(_))));
}
