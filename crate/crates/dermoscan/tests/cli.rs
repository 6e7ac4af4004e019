mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;

use dermoscan::cli::run;
use dermoscan::ingest::read_manifest;
use dermoscan_core::taxonomy::LABEL_ORDER;
use proptest::prelude::*;

fn dermoscan(args: &[&str]) -> dermoscan::cli::CommandResult {
    run(std::iter::once("dermoscan").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dermoscan");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    assert_eq!(status(&["--help"]).status.code(), Some(0));
    assert_eq!(status(&["bogus"]).status.code(), Some(2));
    assert_eq!(status(&["eval", "--tta", "x"]).status.code(), Some(2));
    let out = status(&["train", "--config", "does/not/exist.json"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("does/not/exist.json"), "{stderr}");
}

#[test]
fn split_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let meta = dir.path().join("HAM10000_metadata.csv");
    fs::write(&meta, common::ham_shaped_metadata()).unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let r = dermoscan(&["split", "--metadata", path(&meta), "--seed", "101096", "--out", path(out)]);
        assert_eq!(r.exit_code, 0);
        assert_eq!(r.artifacts_written, [out.to_path_buf()]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = read_manifest(&a).unwrap();
    assert_eq!((m.train_ids.len(), m.valid_ids.len()), (8012, 2003));
    let train: BTreeSet<_> = m.train_ids.iter().collect();
    assert!(m.valid_ids.iter().all(|id| !train.contains(id)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn grouped_split_keeps_lesions_together(seed in any::<u64>(), frac in 0.05f64..0.5) {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("meta.csv");
        let text = common::ham_shaped_metadata();
        fs::write(&meta, &text).unwrap();
        let out = dir.path().join("split.json");
        let r = dermoscan(&["split", "--metadata", path(&meta), "--seed", &seed.to_string(),
            "--val-frac", &frac.to_string(), "--group-by-lesion", "--out", path(&out)]);
        prop_assert_eq!(r.exit_code, 0);
        let m = read_manifest(&out).unwrap();
        let valid: BTreeSet<&str> = m.valid_ids.iter().map(String::as_str).collect();
        let mut side = std::collections::HashMap::new();
        for line in text.lines().skip(1) {
            let mut cols = line.split(',');
            let (lesion, image) = (cols.next().unwrap(), cols.next().unwrap());
            let v = valid.contains(image);
            prop_assert_eq!(*side.entry(lesion).or_insert(v), v, "lesion {} split", lesion);
        }
        prop_assert_eq!(m.train_ids.len() + m.valid_ids.len(), 10_015);
        prop_assert!(m.valid_ids.len() as f64 >= (frac * 10_015.0).round());
    }
}

#[test]
fn ingest_reports_counts_and_missing_images() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let mut items = common::write_corpus(&raw, &[1, 2, 1, 1, 3, 1, 1], 32, 0);
    items.push(("ISIC_0000404".into(), dermoscan_core::LesionLabel::Nv));
    let meta = dir.path().join("meta.csv");
    fs::write(&meta, common::metadata_for(&items)).unwrap();
    let out = dir.path().join("data");
    let mut args = vec!["ingest", "--metadata", path(&meta), "--out", path(&out), "--images"];
    let dirs: Vec<String> = LABEL_ORDER.iter().map(|l| raw.join(l.code()).to_string_lossy().into_owned()).collect();
    args.extend(dirs.iter().map(String::as_str));
    let r = dermoscan(&args);
    assert_eq!(r.exit_code, 0);
    let counts: serde_json::Value = serde_json::from_slice(&fs::read(out.join("class_counts.json")).unwrap()).unwrap();
    assert_eq!(counts, serde_json::json!({"akiec": 1, "bcc": 2, "bkl": 1, "df": 1, "mel": 3, "nv": 2, "vasc": 1}));
    assert_eq!(fs::read_to_string(out.join("missing_images.txt")).unwrap(), "ISIC_0000404\n");
    assert_eq!(fs::read_dir(out.join("mel")).unwrap().count(), 3);
    assert!(r.artifacts_written.contains(&out.join("metadata.csv")));
}

#[test]
fn unknown_label_fails_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let meta = dir.path().join("meta.csv");
    fs::write(&meta, "lesion_id,image_id,dx\nL1,ISIC_1,scc\n").unwrap();
    let r = dermoscan(&["ingest", "--metadata", path(&meta), "--out", path(&dir.path().join("o"))]);
    assert_eq!(r.exit_code, 1);
    assert!(r.artifacts_written.is_empty());
}

#[test]
fn ingest_split_train_eval_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let raw = d.join("raw");
    let items = common::write_corpus(&raw, &[3; 7], 48, 0);
    fs::write(d.join("meta.csv"), common::metadata_for(&items)).unwrap();
    let dirs: Vec<String> = LABEL_ORDER.iter().map(|l| raw.join(l.code()).to_string_lossy().into_owned()).collect();
    let mut args: Vec<String> = vec!["ingest".into(), "--metadata".into(), path(&d.join("meta.csv")).to_owned(), "--out".into(), path(&d.join("data")).to_owned(), "--images".into()];
    args.extend(dirs);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(dermoscan(&args).exit_code, 0);

    let split = d.join("split.json");
    assert_eq!(dermoscan(&["split", "--metadata", path(&d.join("data/metadata.csv")), "--val-frac", "0.3", "--seed", "5", "--out", path(&split)]).exit_code, 0);

    let config = serde_json::json!({
        "arch": "resnet18",
        "epochs": 3,
        "frozen_epochs": 1,
        "pretrained": false,
        "policy": common::small_policy(48, 32),
    });
    fs::write(d.join("train.json"), config.to_string()).unwrap();
    let ckpt = d.join("ckpt");
    let r = dermoscan(&["train", "--config", path(&d.join("train.json")), "--epochs", "1", "--batch-size", "4",
        "--split", path(&split), "--corpus", path(&d.join("data")), "--out", path(&ckpt)]);
    assert_eq!(r.exit_code, 0);
    for f in ["model.safetensors", "model.json", "sweep.json", "epochs.csv", "train_config.json"] {
        assert!(ckpt.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(ckpt.join("epochs.csv")).unwrap().lines().count(), 2);

    for report in ["r1", "r2"] {
        let r = dermoscan(&["eval", "--ckpt", path(&ckpt), "--split", path(&split), "--report-dir", path(&d.join(report))]);
        assert_eq!(r.exit_code, 0);
    }
    for f in ["metrics.csv", "confusion_matrix.csv", "sweep.csv", "roc.csv", "predictions.json", "metrics.svg"] {
        assert_eq!(fs::read(d.join("r1").join(f)).unwrap(), fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("r1/metrics.csv")).unwrap();
    assert!(metrics.starts_with("label,precision,recall,f1,support\n"));

    let sweep = d.join("op/sweep.csv");
    let r = dermoscan(&["sweep", "--ckpt", path(&ckpt), "--split", path(&split), "--out", path(&sweep), "--tta", "2"]);
    assert_eq!(r.exit_code, 0);
    let csv = fs::read_to_string(&sweep).unwrap();
    assert_eq!(csv.lines().next(), Some("t,sensitivity,specificity,accuracy"));
    assert_eq!(csv.lines().count(), 102);
    assert!(sweep.with_extension("json").is_file());

    let r = dermoscan(&["eval", "--ckpt", path(&d.join("nope")), "--split", path(&split), "--report-dir", path(&d.join("r3"))]);
    assert_eq!(r.exit_code, 1);
}
