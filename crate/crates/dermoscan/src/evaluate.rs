//! Inference over staged images: plain predictions, test-time augmentation,
//! and the regrouped binary scores.

use std::collections::BTreeMap;

use dermoscan_core::augment::{batch_augment, validation_transform, AugmentationPolicy};
use dermoscan_core::image::ImageTensor;
use dermoscan_core::loss::softmax;
use dermoscan_core::metrics::{PredictionSet, ScoredSample};
use dermoscan_core::{LesionLabel, Taxonomy, NUM_CLASSES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{to_batch, to_rows};
use crate::error::{Error, Result};
use crate::zoo::Network;

/// Images per forward pass during inference.
pub const INFERENCE_BATCH: usize = 16;

/// Default number of augmented views added to the deterministic one.
pub const DEFAULT_TTA_VIEWS: usize = 4;

fn probabilities(net: &Network, views: &[ImageTensor]) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let logits = tch::no_grad(|| net.forward_t(&to_batch(views), false));
    to_rows(&logits)
        .into_iter()
        .map(|row| {
            let p = softmax(&row);
            <[f64; NUM_CLASSES]>::try_from(p.as_slice())
                .map_err(|_| Error::InvalidConfig(format!("network emits {} classes, expected {NUM_CLASSES}", p.len())))
        })
        .collect()
}

/// Softmax probabilities of the deterministic validation view of each
/// staged image.
pub fn predict(net: &Network, images: &[(String, ImageTensor)], policy: &AugmentationPolicy, model_id: &str) -> Result<PredictionSet> {
    let mut set = PredictionSet::new(model_id, 0);
    for chunk in images.chunks(INFERENCE_BATCH) {
        let views = chunk
            .iter()
            .map(|(_, img)| validation_transform(img, policy))
            .collect::<dermoscan_core::Result<Vec<_>>>()?;
        for ((id, _), p) in chunk.iter().zip(probabilities(net, &views)?) {
            set.entries.insert(id.clone(), p);
        }
    }
    Ok(set)
}

/// Mean of the probability vectors of `n - 1` seeded augmented views.
/// Returns the sum, not the mean, so the caller can add the plain view.
fn augmented_sum(net: &Network, image: &ImageTensor, policy: &AugmentationPolicy, views: usize, seed: u64) -> Result<[f64; NUM_CLASSES]> {
    let mut sum = [0.0; NUM_CLASSES];
    if views == 0 {
        return Ok(sum);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let copies = vec![image.clone(); views];
    let augmented = batch_augment(&copies, policy, &mut rng)?;
    for chunk in augmented.chunks(INFERENCE_BATCH) {
        for p in probabilities(net, chunk)? {
            for (s, v) in sum.iter_mut().zip(p) {
                *s += v;
            }
        }
    }
    Ok(sum)
}

fn merge(plain: &[f64; NUM_CLASSES], augmented_sum: &[f64; NUM_CLASSES], n: usize) -> [f64; NUM_CLASSES] {
    if n == 1 {
        return *plain;
    }
    let mut out = [0.0; NUM_CLASSES];
    for i in 0..NUM_CLASSES {
        out[i] = (plain[i] + augmented_sum[i]) / n as f64;
    }
    out
}

fn check_views(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidConfig("test-time augmentation needs at least one view".into()))
    } else {
        Ok(())
    }
}

/// Mean of the deterministic view and `n - 1` augmented views seeded by `seed`.
pub fn predict_tta(net: &Network, image: &ImageTensor, policy: &AugmentationPolicy, n: usize, seed: u64) -> Result<[f64; NUM_CLASSES]> {
    check_views(n)?;
    let plain = predict(net, &[(String::new(), image.clone())], policy, "")?;
    let plain = plain.entries[""];
    Ok(merge(&plain, &augmented_sum(net, image, policy, n - 1, seed)?, n))
}

/// 64-bit FNV-1a, used to derive per-image seeds.
pub fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-image TTA seed: the run seed mixed with the image id.
pub fn image_seed(seed: u64, image_id: &str) -> u64 {
    seed ^ fnv1a(image_id)
}

/// [`predict_tta`] over a set. The deterministic views are computed exactly
/// as [`predict`] computes them.
pub fn predict_tta_set(
    net: &Network,
    images: &[(String, ImageTensor)],
    policy: &AugmentationPolicy,
    n: usize,
    seed: u64,
    model_id: &str,
) -> Result<PredictionSet> {
    check_views(n)?;
    let mut set = predict(net, images, policy, model_id)?;
    set.tta_n = n;
    if n == 1 {
        return Ok(set);
    }
    for (id, img) in images {
        let sum = augmented_sum(net, img, policy, n - 1, image_seed(seed, id))?;
        let plain = set.entries[id];
        set.entries.insert(id.clone(), merge(&plain, &sum, n));
    }
    Ok(set)
}

/// Malignant scores paired with binary truths derived from the 7-class labels.
pub fn scored_against(preds: &PredictionSet, truths: &BTreeMap<String, LesionLabel>, taxonomy: &Taxonomy) -> Result<Vec<ScoredSample>> {
    preds
        .entries
        .iter()
        .map(|(id, p)| {
            let truth = truths.get(id).ok_or_else(|| dermoscan_core::Error::MissingTruth(id.clone()))?;
            Ok((taxonomy.malignant_probability(p), taxonomy.is_malignant(*truth)))
        })
        .collect()
}
