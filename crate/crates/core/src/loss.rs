//! Softmax cross-entropy on plain slices.
//!
//! The training loop evaluates the same quantities on tensors; these scalar
//! versions are the reference used for checking and for metric code.

use alloc::vec::Vec;

use crate::error::{Error, Result};

fn check(logits: &[f64], target: usize) -> Result<()> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    Ok(())
}

/// `log(sum(exp(x)))`, shifted by the maximum.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|v| libm::exp(v - max)).sum();
    max + libm::log(s)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| libm::exp(v - max)).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    check(logits, target)?;
    Ok((log_sum_exp(logits) - logits[target]).max(0.0))
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax - one_hot`.
pub fn cross_entropy_grad(logits: &[f64], target: usize) -> Result<Vec<f64>> {
    check(logits, target)?;
    let mut g = softmax(logits);
    g[target] -= 1.0;
    Ok(g)
}

/// `lam * CE(logits, a) + (1 - lam) * CE(logits, b)`.
pub fn mixup_loss(logits: &[f64], label_a: usize, label_b: usize, lam: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidPolicy("mixup weight must lie in [0, 1]"));
    }
    let a = cross_entropy(logits, label_a)?;
    if label_a == label_b {
        return Ok(a);
    }
    let b = cross_entropy(logits, label_b)?;
    Ok(lam * a + (1.0 - lam) * b)
}
