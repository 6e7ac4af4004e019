mod common;

use dermoscan::data::to_batch;
use dermoscan::evaluate::{predict, predict_tta, predict_tta_set};
use dermoscan::imageio;
use dermoscan::zoo::{build_model, ArchitectureId, ModelSpec, Network};
use dermoscan_core::augment::batch_augment;
use dermoscan_core::image::ImageTensor;
use dermoscan_core::loss::softmax;
use dermoscan_core::metrics::PredictionSet;
use dermoscan_core::LesionLabel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net() -> Network {
    tch::manual_seed(21);
    build_model(&ModelSpec::new(ArchitectureId::Resnet18, 7, false)).unwrap()
}

fn staged(label: LesionLabel, variant: u64) -> ImageTensor {
    let bytes = common::png_bytes(&common::synthetic_lesion(label, variant, 70, 60));
    imageio::decode_staged(&bytes, 48).unwrap()
}

fn images() -> Vec<(String, ImageTensor)> {
    (0..5).map(|i| (format!("img{i}"), staged(LesionLabel::Mel, i))).collect()
}

#[test]
fn probabilities_are_well_formed_and_deterministic() {
    let net = net();
    let policy = common::small_policy(48, 32);
    let mut imgs = images();
    imgs.push(("twin".into(), imgs[0].1.clone()));
    let preds = predict(&net, &imgs, &policy, "m").unwrap();
    assert_eq!(preds.tta_n, 0);
    assert!(preds.is_well_formed(1e-5));
    assert_eq!(preds.entries["img0"], preds.entries["twin"]);
    let again = predict(&net, &imgs, &policy, "m").unwrap();
    assert_eq!(preds, again);

    let json = serde_json::to_value(&preds).unwrap();
    assert_eq!(json["label_order"], serde_json::json!(["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"]));
    let back: PredictionSet = serde_json::from_value(json).unwrap();
    assert_eq!(back, preds);
}

#[test]
fn one_view_tta_equals_predict() {
    let net = net();
    let policy = common::small_policy(48, 32);
    let imgs = images();
    let plain = predict(&net, &imgs, &policy, "m").unwrap();
    let set = predict_tta_set(&net, &imgs, &policy, 1, 5, "m").unwrap();
    assert_eq!(set.tta_n, 1);
    for (id, img) in &imgs {
        assert_eq!(set.entries[id], plain.entries[id]);
        let single = predict_tta(&net, img, &policy, 1, 5).unwrap();
        let diff = single.iter().zip(&plain.entries[id]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{id}: {diff}");
    }
}

#[test]
fn two_views_average_plain_and_augmented() {
    let net = net();
    let policy = common::small_policy(48, 32);
    let img = staged(LesionLabel::Bcc, 3);
    let seed = 77;
    let p = predict(&net, &[("x".into(), img.clone())], &policy, "m").unwrap().entries["x"];
    let view = batch_augment(&[img.clone()], &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let logits = tch::no_grad(|| net.forward_t(&to_batch(&view), false)).to_kind(tch::Kind::Double);
    let q = softmax(&Vec::<f64>::try_from(logits.view([-1])).unwrap());
    let got = predict_tta(&net, &img, &policy, 2, seed).unwrap();
    for k in 0..7 {
        assert!((got[k] - (p[k] + q[k]) / 2.0).abs() < 1e-6, "class {k}");
    }
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

#[test]
fn tta_is_seeded() {
    let net = net();
    let policy = common::small_policy(48, 32);
    let img = staged(LesionLabel::Nv, 8);
    let a = predict_tta(&net, &img, &policy, 5, 1).unwrap();
    let b = predict_tta(&net, &img, &policy, 5, 1).unwrap();
    let c = predict_tta(&net, &img, &policy, 5, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(predict_tta(&net, &img, &policy, 0, 1).is_err());
}

#[test]
fn wrong_staged_size_is_a_shape_mismatch() {
    let net = net();
    let policy = common::small_policy(48, 32);
    let img = ImageTensor::filled(40, 40, 0.5);
    let err = predict(&net, &[("x".into(), img)], &policy, "m").unwrap_err();
    assert!(matches!(err, dermoscan::Error::Core(dermoscan_core::Error::ShapeMismatch { .. })), "{err}");
}
