//! Presizing augmentation: images are staged at a large square size, then
//! each training batch gets random geometric and photometric transforms
//! computed directly at the final resolution.
//!
//! Rotated crops are shrunk and positioned so that every sampled point lies
//! inside the staged image, which is what the large staging margin buys.

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{normalize_in_place, resample, ImageTensor, Window, CHANNELS};

pub const IMAGENET_MEAN: [f32; CHANNELS] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; CHANNELS] = [0.229, 0.224, 0.225];

/// Presizing and per-batch transform configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    /// Side of the staged square image.
    pub presize_to: usize,
    /// Side of the network input.
    pub final_size: usize,
    /// Full width of the rotation interval in degrees, centred on 0.
    pub rotation_range: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Smallest crop side as a fraction of the staged side.
    pub crop_scale_min: f64,
    /// Brightness is multiplied by a factor in `[1 - j, 1 + j]`.
    pub brightness_jitter: f64,
    pub normalize_mean: [f32; CHANNELS],
    pub normalize_std: [f32; CHANNELS],
    /// Beta distribution parameter; 0 disables mixup.
    pub mixup_alpha: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            presize_to: 460,
            final_size: 224,
            rotation_range: 360.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            crop_scale_min: 0.75,
            brightness_jitter: 0.2,
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
            mixup_alpha: 0.4,
        }
    }
}

impl AugmentationPolicy {
    /// No random transforms and no normalization: augmentation reduces to a
    /// plain resize from `presize_to` to `final_size`.
    pub fn identity(presize_to: usize, final_size: usize) -> Self {
        Self {
            presize_to,
            final_size,
            rotation_range: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            crop_scale_min: 1.0,
            brightness_jitter: 0.0,
            normalize_mean: [0.0; CHANNELS],
            normalize_std: [1.0; CHANNELS],
            mixup_alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.final_size == 0 {
            return Err(Error::InvalidPolicy("final_size must be positive"));
        }
        if self.presize_to < self.final_size {
            return Err(Error::InvalidPolicy("presize_to must be at least final_size"));
        }
        if !prob(self.hflip_prob) || !prob(self.vflip_prob) {
            return Err(Error::InvalidPolicy("flip probabilities must lie in [0, 1]"));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(Error::InvalidPolicy("crop_scale_min must lie in (0, 1]"));
        }
        if !(0.0..=360.0).contains(&self.rotation_range) {
            return Err(Error::InvalidPolicy("rotation_range must lie in [0, 360]"));
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) {
            return Err(Error::InvalidPolicy("brightness_jitter must lie in [0, 1)"));
        }
        if self.normalize_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidPolicy("normalize_std must be positive"));
        }
        if !(self.mixup_alpha >= 0.0) || !self.mixup_alpha.is_finite() {
            return Err(Error::InvalidPolicy("mixup_alpha must be a non-negative number"));
        }
        Ok(())
    }

    fn check_staged(&self, image: &ImageTensor) -> Result<()> {
        if image.is_square(self.presize_to) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.presize_to,
                height: image.height(),
                width: image.width(),
            })
        }
    }
}

/// The random draws for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemTransform {
    pub window: Window,
    pub brightness: f32,
}

impl ItemTransform {
    pub fn identity(side: usize) -> Self {
        Self {
            window: Window::full(side, side),
            brightness: 1.0,
        }
    }
}

/// Side of the largest square rotated by `angle` that fits in a `side x side` square.
pub fn max_rotated_side(side: f64, angle: f64) -> f64 {
    let (s, c) = (libm::fabs(libm::sin(angle)), libm::fabs(libm::cos(angle)));
    side / (s + c)
}

/// Draw one item's transform. The number and order of draws is the same for
/// every policy, so changing one parameter never shifts the others' streams.
pub fn sample_transform<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> ItemTransform {
    let staged = policy.presize_to as f64;
    let u_angle: f64 = rng.random();
    let u_scale: f64 = rng.random();
    let u_dx: f64 = rng.random();
    let u_dy: f64 = rng.random();
    let u_hflip: f64 = rng.random();
    let u_vflip: f64 = rng.random();
    let u_bright: f64 = rng.random();

    let angle = if policy.rotation_range > 0.0 {
        (u_angle - 0.5) * policy.rotation_range.to_radians()
    } else {
        0.0
    };
    let scale = if policy.crop_scale_min < 1.0 {
        policy.crop_scale_min + (1.0 - policy.crop_scale_min) * u_scale
    } else {
        1.0
    };
    let side = (scale * staged).min(max_rotated_side(staged, angle));
    let half_extent = if angle == 0.0 {
        side / 2.0
    } else {
        side / 2.0 * (libm::fabs(libm::sin(angle)) + libm::fabs(libm::cos(angle)))
    };
    let margin = (staged / 2.0 - half_extent).max(0.0);
    let centre = staged / 2.0;
    let (cx, cy) = if margin > 0.0 {
        (centre + (2.0 * u_dx - 1.0) * margin, centre + (2.0 * u_dy - 1.0) * margin)
    } else {
        (centre, centre)
    };
    let brightness = if policy.brightness_jitter > 0.0 {
        (1.0 + (2.0 * u_bright - 1.0) * policy.brightness_jitter) as f32
    } else {
        1.0
    };
    ItemTransform {
        window: Window {
            center_y: cy,
            center_x: cx,
            height: side,
            width: side,
            angle,
            flip_horizontal: u_hflip < policy.hflip_prob,
            flip_vertical: u_vflip < policy.vflip_prob,
        },
        brightness,
    }
}

/// Apply `t` to a staged image, producing a `final_size` image with values
/// still in `[0, 1]`.
pub fn apply_transform(image: &ImageTensor, final_size: usize, t: &ItemTransform) -> ImageTensor {
    let mut out = resample(image, final_size, final_size, &t.window);
    if t.brightness != 1.0 {
        let b = t.brightness;
        out.data_mut().iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    out
}

/// Random transforms for a batch, before normalization.
///
/// Each item draws from its own generator seeded by one `u64` taken from
/// `rng`, so items can be processed independently.
pub fn batch_augment_unnormalized<R: RngCore + ?Sized>(
    batch: &[ImageTensor],
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    policy.validate()?;
    for img in batch {
        policy.check_staged(img)?;
    }
    Ok(batch
        .iter()
        .map(|img| {
            let mut item_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let t = sample_transform(policy, &mut item_rng);
            apply_transform(img, policy.final_size, &t)
        })
        .collect())
}

/// Per-batch training transforms followed by normalization.
pub fn batch_augment<R: RngCore + ?Sized>(
    batch: &[ImageTensor],
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    let mut out = batch_augment_unnormalized(batch, policy, rng)?;
    for img in &mut out {
        normalize_in_place(img, &policy.normalize_mean, &policy.normalize_std)?;
    }
    Ok(out)
}

/// Deterministic evaluation transform: resize the whole staged square to
/// `final_size`, then normalize.
pub fn validation_transform(image: &ImageTensor, policy: &AugmentationPolicy) -> Result<ImageTensor> {
    policy.validate()?;
    policy.check_staged(image)?;
    let mut out = apply_transform(image, policy.final_size, &ItemTransform::identity(policy.presize_to));
    normalize_in_place(&mut out, &policy.normalize_mean, &policy.normalize_std)?;
    Ok(out)
}
