//! Staged images for training and evaluation, and batch tensors.

use std::collections::HashMap;

use dermoscan_core::image::{ImageTensor, CHANNELS};
use dermoscan_core::LesionLabel;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::imageio;
use crate::ingest::Corpus;

/// Default cap on cached staged pixels.
pub const DEFAULT_CACHE_BYTES: usize = 1 << 30;

/// Loads corpus images staged at one side length, keeping as many as fit in
/// the byte budget in memory.
pub struct StagedImages<'a> {
    corpus: &'a Corpus,
    side: usize,
    budget: usize,
    used: usize,
    cache: HashMap<String, Vec<u8>>,
}

impl<'a> StagedImages<'a> {
    pub fn new(corpus: &'a Corpus, side: usize, budget_bytes: usize) -> Self {
        Self {
            corpus,
            side,
            budget: budget_bytes,
            used: 0,
            cache: HashMap::new(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn label(&self, id: &str) -> Result<LesionLabel> {
        self.corpus
            .entries
            .get(id)
            .map(|e| e.label)
            .ok_or_else(|| Error::CorpusIncomplete(vec![id.to_string()]))
    }

    pub fn get(&mut self, id: &str) -> Result<ImageTensor> {
        if let Some(rgb) = self.cache.get(id) {
            return Ok(imageio::unstage(rgb, self.side));
        }
        let entry = self
            .corpus
            .entries
            .get(id)
            .ok_or_else(|| Error::CorpusIncomplete(vec![id.to_string()]))?;
        let rgb = imageio::stage(&imageio::load(&entry.path)?, self.side)?;
        let img = imageio::unstage(&rgb, self.side);
        if self.used + rgb.len() <= self.budget {
            self.used += rgb.len();
            self.cache.insert(id.to_string(), rgb);
        }
        Ok(img)
    }

    pub fn get_many(&mut self, ids: &[String]) -> Result<Vec<ImageTensor>> {
        ids.iter().map(|id| self.get(id)).collect()
    }
}

/// Stack equally sized images into a `[n, 3, h, w]` float tensor.
pub fn to_batch(images: &[ImageTensor]) -> Tensor {
    assert!(!images.is_empty(), "empty batch");
    let (h, w) = (images[0].height(), images[0].width());
    let mut flat = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        assert_eq!((img.height(), img.width()), (h, w), "batch images must share a shape");
        flat.extend_from_slice(img.data());
    }
    Tensor::from_slice(&flat)
        .to_kind(Kind::Float)
        .reshape([images.len() as i64, CHANNELS as i64, h as i64, w as i64])
}

/// Rows of a `[n, k]` tensor as f64 vectors.
pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let t = t.to_kind(Kind::Double).contiguous();
    let size = t.size();
    let (n, k) = (size[0] as usize, size[1] as usize);
    let flat: Vec<f64> = Vec::try_from(t.view([-1])).expect("double tensor");
    (0..n).map(|i| flat[i * k..(i + 1) * k].to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_roundtrip() {
        let a = ImageTensor::filled(2, 3, 0.25);
        let b = ImageTensor::filled(2, 3, 0.75);
        let t = to_batch(&[a, b]);
        assert_eq!(t.size(), [2, 3, 2, 3]);
        let rows = to_rows(&t.reshape([2, -1]));
        assert!(rows[0].iter().all(|v| *v == 0.25));
        assert!(rows[1].iter().all(|v| *v == 0.75));
    }
}
