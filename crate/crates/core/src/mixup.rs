//! Mixup: train on convex combinations of image pairs.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::taxonomy::LesionLabel;

/// A batch where item `i` is `lam[i] * image_a[i] + (1 - lam[i]) * image_b[i]`.
///
/// `label_a[i]` is the item's own label and `label_b[i]` its partner's.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Vec<ImageTensor>,
    pub label_a: Vec<LesionLabel>,
    pub label_b: Vec<LesionLabel>,
    pub lam: Vec<f64>,
    /// Index of each item's partner in the input batch.
    pub partner: Vec<usize>,
}

/// Elementwise `lam * a + (1 - lam) * b`.
pub fn mix_images(a: &ImageTensor, b: &ImageTensor, lam: f64) -> ImageTensor {
    assert_eq!((a.height(), a.width()), (b.height(), b.width()), "mixup partners must share a shape");
    if lam == 1.0 {
        return a.clone();
    }
    let (wa, wb) = (lam as f32, (1.0 - lam) as f32);
    let data = a.data().iter().zip(b.data()).map(|(x, y)| wa * x + wb * y).collect();
    ImageTensor::new(a.height(), a.width(), data).expect("non-empty")
}

/// Draw one mixing weight from `Beta(alpha, alpha)`; `alpha == 0` means no mixing.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidPolicy("mixup_alpha must be a non-negative number"));
    }
    if alpha == 0.0 {
        return Ok(1.0);
    }
    let beta = Beta::new(alpha, alpha).map_err(|_| Error::InvalidPolicy("mixup_alpha out of range"))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// Mix every item with a partner chosen by a seeded permutation of the batch.
pub fn mixup<R: Rng + ?Sized>(
    images: &[ImageTensor],
    labels: &[LesionLabel],
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    assert_eq!(images.len(), labels.len(), "one label per image");
    let n = images.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    let lam = (0..n).map(|_| sample_lambda(alpha, rng)).collect::<Result<Vec<f64>>>()?;
    let images = (0..n).map(|i| mix_images(&images[i], &images[partner[i]], lam[i])).collect();
    Ok(MixedBatch {
        images,
        label_a: labels.to_vec(),
        label_b: partner.iter().map(|&j| labels[j]).collect(),
        lam,
        partner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_zero_is_a_no_op() {
        let imgs = vec![ImageTensor::filled(3, 3, 0.2), ImageTensor::filled(3, 3, 0.9), ImageTensor::filled(3, 3, 0.4)];
        let labels = [LesionLabel::Nv, LesionLabel::Mel, LesionLabel::Df];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = mixup(&imgs, &labels, 0.0, &mut rng).unwrap();
        assert_eq!(m.images, imgs);
        assert!(m.lam.iter().all(|l| *l == 1.0));
        assert_eq!(m.label_a, labels);
    }

    #[test]
    fn midpoint_of_black_and_white() {
        let a = ImageTensor::filled(4, 4, 0.0);
        let b = ImageTensor::filled(4, 4, 1.0);
        assert!(mix_images(&a, &b, 0.5).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn needs_two_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = mixup(&[ImageTensor::filled(2, 2, 0.0)], &[LesionLabel::Nv], 0.4, &mut rng).unwrap_err();
        assert_eq!(err, Error::BatchTooSmall(1));
    }

    #[test]
    fn partners_form_a_permutation() {
        let imgs: Vec<_> = (0..8).map(|i| ImageTensor::filled(2, 2, i as f32 / 8.0)).collect();
        let labels = [LesionLabel::Nv; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = mixup(&imgs, &labels, 0.4, &mut rng).unwrap();
        let mut p = m.partner.clone();
        p.sort();
        assert_eq!(p, (0..8).collect::<Vec<_>>());
        for i in 0..8 {
            let expected = mix_images(&imgs[i], &imgs[m.partner[i]], m.lam[i]);
            assert_eq!(m.images[i], expected);
        }
    }
}
