//! Shared fixtures: HAM10000-shaped metadata, synthetic lesion images and
//! small checkpoints.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dermoscan::checkpoint::{save_checkpoint, save_sweep, CheckpointMeta};
use dermoscan::zoo::{build_model, ArchitectureId, ModelSpec};
use dermoscan_core::augment::AugmentationPolicy;
use dermoscan_core::metrics::{threshold_grid, threshold_sweep};
use dermoscan_core::{LesionLabel, LABEL_ORDER};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Published per-class image counts of HAM10000, in label order.
pub const HAM_COUNTS: [(LesionLabel, usize); 7] = [
    (LesionLabel::Akiec, 327),
    (LesionLabel::Bcc, 514),
    (LesionLabel::Bkl, 1099),
    (LesionLabel::Df, 115),
    (LesionLabel::Mel, 1113),
    (LesionLabel::Nv, 6705),
    (LesionLabel::Vasc, 142),
];

/// Metadata with the HAM10000 columns, id scheme and class counts. Some
/// lesions have several images, as in the real file.
pub fn ham_shaped_metadata() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(10015);
    let mut labels: Vec<LesionLabel> = HAM_COUNTS.iter().flat_map(|(l, n)| std::iter::repeat(*l).take(*n)).collect();
    use rand::seq::SliceRandom;
    labels.shuffle(&mut rng);
    let sites = ["back", "lower extremity", "trunk", "upper extremity", "abdomen", "face", "scalp", "unknown"];
    let mut csv = String::from("lesion_id,image_id,dx,dx_type,age,sex,localization\n");
    let mut lesion = 0usize;
    let mut prev: Option<LesionLabel> = None;
    for (i, label) in labels.iter().enumerate() {
        if prev != Some(*label) || rng.random::<f64>() > 0.3 {
            lesion += 1;
        }
        prev = Some(*label);
        let age = if rng.random::<f64>() < 0.005 { String::new() } else { format!("{}.0", 5 * rng.random_range(1..18)) };
        let sex = ["male", "female", "unknown"][rng.random_range(0..3)];
        let dx_type = ["histo", "follow_up", "consensus", "confocal"][rng.random_range(0..4)];
        let _ = writeln!(
            csv,
            "HAM_{lesion:07},ISIC_{:07},{},{dx_type},{age},{sex},{}",
            24306 + i,
            label.code(),
            sites[rng.random_range(0..sites.len())]
        );
    }
    csv
}

fn class_colour(label: LesionLabel) -> [u8; 3] {
    match label {
        LesionLabel::Akiec => [220, 30, 30],
        LesionLabel::Bcc => [30, 200, 40],
        LesionLabel::Bkl => [30, 40, 220],
        LesionLabel::Df => [230, 220, 30],
        LesionLabel::Mel => [20, 20, 20],
        LesionLabel::Nv => [200, 40, 220],
        LesionLabel::Vasc => [30, 210, 220],
    }
}

/// A skin-toned image with one class-coloured lesion. Skin tone, lesion
/// shade, size, outline and position vary with `variant`.
pub fn synthetic_lesion(label: LesionLabel, variant: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(variant.wrapping_mul(31).wrapping_add(label.index() as u64));
    let side = width.min(height) as f64;
    let r = side * rng.random_range(0.18..0.3);
    let cx = width as f64 / 2.0 + rng.random_range(-0.12..0.12) * side;
    let cy = height as f64 / 2.0 + rng.random_range(-0.12..0.12) * side;
    let lobes = rng.random_range(2..7) as f64;
    let wobble = rng.random_range(0.0..0.2);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let shade = rng.random_range(0.75..1.1);
    let skin_scale = rng.random_range(0.8..1.1);
    let skin = [215.0 * skin_scale, 170.0 * skin_scale, 145.0 * skin_scale];
    let c = class_colour(label).map(|v| v as f64 * shade);
    RgbImage::from_fn(width, height, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let edge = r * (1.0 + wobble * (lobes * dy.atan2(dx) + phase).sin());
        let inside = ((dx * dx + dy * dy).sqrt() / edge).min(1.5);
        let noise = rng.random_range(-10.0..10.0);
        let px = if inside < 1.0 {
            // lesions darken slightly towards the centre
            let k = 0.85 + 0.15 * inside;
            [c[0] * k, c[1] * k, c[2] * k]
        } else {
            skin
        };
        Rgb(px.map(|v| (v + noise).clamp(0.0, 255.0) as u8))
    })
}

/// Write `per_class[i]` synthetic images of `LABEL_ORDER[i]` into
/// `<root>/<label>/<id>.jpg`. Returns `(image_id, label)` pairs.
pub fn write_corpus(root: &Path, per_class: &[usize; 7], side: u32, first_variant: u64) -> Vec<(String, LesionLabel)> {
    let mut out = Vec::new();
    for (label, &n) in LABEL_ORDER.iter().zip(per_class) {
        let dir = root.join(label.code());
        fs::create_dir_all(&dir).unwrap();
        for k in 0..n as u64 {
            let variant = first_variant + k;
            let id = format!("SYN_{}_{variant:04}", label.code());
            synthetic_lesion(*label, variant, side + 20, side).save(dir.join(format!("{id}.jpg"))).unwrap();
            out.push((id, *label));
        }
    }
    out
}

pub fn metadata_for(items: &[(String, LesionLabel)]) -> String {
    let mut csv = String::from("lesion_id,image_id,dx,dx_type,age,sex,localization\n");
    for (i, (id, label)) in items.iter().enumerate() {
        let _ = writeln!(csv, "LES_{i:05},{id},{},histo,50.0,female,back", label.code());
    }
    csv
}

/// Small policy so CPU tests stay fast.
pub fn small_policy(presize: usize, final_size: usize) -> AugmentationPolicy {
    AugmentationPolicy {
        presize_to: presize,
        final_size,
        ..AugmentationPolicy::default()
    }
}

/// An untrained checkpoint with an optional bundled sweep.
pub fn fixture_checkpoint(dir: &Path, model_id: &str, arch: ArchitectureId, policy: &AugmentationPolicy, with_sweep: bool, seed: i64) -> PathBuf {
    tch::manual_seed(seed);
    let spec = ModelSpec::new(arch, 7, false);
    let net = build_model(&spec).unwrap();
    let meta = CheckpointMeta::new(model_id, &spec, policy);
    save_checkpoint(dir, &net, &meta).unwrap();
    if with_sweep {
        let samples: Vec<(f64, bool)> = (0..40).map(|i| ((i as f64 * 0.37) % 1.0, i % 3 == 0)).collect();
        save_sweep(dir, &threshold_sweep(&samples, &threshold_grid(0.01)).unwrap()).unwrap();
    }
    dir.to_path_buf()
}

pub fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    buf.into_inner()
}
