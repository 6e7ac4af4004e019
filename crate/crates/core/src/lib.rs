//! Allocation-only building blocks for dermoscopic lesion classification.
//!
//! Everything in this crate is pure: no file system, no clock, no global RNG.
//! Randomness always comes from a caller-supplied generator so that splits,
//! augmentation draws and mixup draws are reproducible from a seed.
//!
//! * [`taxonomy`] - the seven HAM10000 diagnosis labels and the benign/malignant regrouping.
//! * [`split`] - deterministic train/validation partitioning.
//! * [`image`] - planar RGB image buffers, bilinear resampling and normalization.
//! * [`augment`] - the two-stage presizing pipeline and per-batch transforms.
//! * [`mixup`] - Beta-weighted convex combinations of image pairs.
//! * [`loss`] - stabilized softmax cross-entropy and its mixup form.
//! * [`schedule`] - cosine annealing.
//! * [`metrics`] - confusion matrices, per-class metrics, operating points and ROC AUC.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod error;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod mixup;
pub mod schedule;
pub mod split;
pub mod taxonomy;

pub use error::{Error, Result};
pub use taxonomy::{LesionLabel, MalignancyClass, Taxonomy, LABEL_ORDER, NUM_CLASSES};
