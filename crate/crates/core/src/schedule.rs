//! Learning-rate schedules.

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`:
/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total_steps)) / 2`.
///
/// `step` is clamped to `[0, total_steps]` and `total_steps` to at least 1.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    if step == 0 {
        return lr_max;
    }
    if step == total {
        return lr_min;
    }
    let progress = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert_eq!(cosine_lr(100, 100, 1e-3, 1e-5), 1e-5);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn monotone_non_increasing(total in 1usize..2000, lr_max in 1e-6f64..1.0, frac in 0.0f64..1.0) {
            let lr_min = lr_max * frac;
            let mut prev = f64::INFINITY;
            for s in 0..=total {
                let lr = cosine_lr(s, total, lr_max, lr_min);
                prop_assert!(lr <= prev);
                prop_assert!(lr >= lr_min && lr <= lr_max);
                prev = lr;
            }
        }
    }
}
