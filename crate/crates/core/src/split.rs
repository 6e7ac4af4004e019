//! Seeded train/validation partitioning.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SEED: u64 = 101_096;
pub const DEFAULT_VALID_FRACTION: f64 = 0.2;

/// A deterministic train/validation partition of image ids.
///
/// Both lists are sorted. Serialized as
/// `{"seed": .., "valid_fraction": .., "train": [..], "valid": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub valid_fraction: f64,
    #[serde(rename = "train")]
    pub train_ids: Vec<String>,
    #[serde(rename = "valid")]
    pub valid_ids: Vec<String>,
}

impl SplitManifest {
    pub fn len(&self) -> usize {
        self.train_ids.len() + self.valid_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of validation items for `n` items: `round(fraction * n)`.
pub fn valid_count(n: usize, valid_fraction: f64) -> usize {
    libm::round(valid_fraction * n as f64) as usize
}

fn check_fraction(valid_fraction: f64) -> Result<()> {
    if valid_fraction > 0.0 && valid_fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidFraction(valid_fraction))
    }
}

/// Uniform random split over image ids.
///
/// Ids are sorted and de-duplicated before shuffling, so the result depends
/// only on the id set, the fraction and the seed.
pub fn split_dataset<S: AsRef<str>>(image_ids: &[S], valid_fraction: f64, seed: u64) -> Result<SplitManifest> {
    check_fraction(valid_fraction)?;
    let ids: BTreeSet<&str> = image_ids.iter().map(AsRef::as_ref).collect();
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<&str> = ids.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_valid = valid_count(order.len(), valid_fraction);
    let mut valid_ids: Vec<String> = order[..n_valid].iter().map(|s| String::from(*s)).collect();
    let mut train_ids: Vec<String> = order[n_valid..].iter().map(|s| String::from(*s)).collect();
    valid_ids.sort();
    train_ids.sort();
    Ok(SplitManifest {
        seed,
        valid_fraction,
        train_ids,
        valid_ids,
    })
}

/// Split that keeps every image of a group (e.g. one lesion photographed
/// several times) on the same side.
///
/// Groups are shuffled and assigned to validation until it holds at least
/// `round(fraction * n)` images, so the validation size can overshoot by up
/// to one group.
pub fn split_grouped<S: AsRef<str>, G: AsRef<str>>(
    items: &[(S, G)],
    valid_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    check_fraction(valid_fraction)?;
    let mut pairs: Vec<(&str, &str)> = items.iter().map(|(i, g)| (i.as_ref(), g.as_ref())).collect();
    pairs.sort();
    pairs.dedup_by(|a, b| a.0 == b.0);
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let groups: BTreeSet<&str> = pairs.iter().map(|p| p.1).collect();
    let mut groups: Vec<&str> = groups.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let target = valid_count(pairs.len(), valid_fraction);
    let mut valid_groups = BTreeSet::new();
    let mut taken = 0usize;
    for g in groups {
        if taken >= target {
            break;
        }
        taken += pairs.iter().filter(|p| p.1 == g).count();
        valid_groups.insert(g);
    }
    let (valid, train): (Vec<&(&str, &str)>, Vec<&(&str, &str)>) = pairs.iter().partition(|p| valid_groups.contains(p.1));
    Ok(SplitManifest {
        seed,
        valid_fraction,
        train_ids: train.into_iter().map(|p| String::from(p.0)).collect(),
        valid_ids: valid.into_iter().map(|p| String::from(p.0)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ISIC_{i:07}")).collect()
    }

    fn assert_partition(m: &SplitManifest, all: &[String]) {
        let train: BTreeSet<&String> = m.train_ids.iter().collect();
        let valid: BTreeSet<&String> = m.valid_ids.iter().collect();
        assert!(train.is_disjoint(&valid));
        let union: BTreeSet<&String> = train.union(&valid).copied().collect();
        let expected: BTreeSet<&String> = all.iter().collect();
        assert_eq!(union, expected);
    }

    #[test]
    fn ten_records_split_eight_two() {
        let all = ids(10);
        for seed in [0, 1, 101_096, u64::MAX] {
            let m = split_dataset(&all, 0.2, seed).unwrap();
            assert_eq!(m.train_ids.len(), 8);
            assert_eq!(m.valid_ids.len(), 2);
            assert_partition(&m, &all);
        }
    }

    #[test]
    fn full_dataset_size() {
        let m = split_dataset(&ids(10_015), 0.2, DEFAULT_SEED).unwrap();
        assert_eq!((m.train_ids.len(), m.valid_ids.len()), (8012, 2003));
    }

    #[test]
    fn repeated_calls_are_identical() {
        let all = ids(100);
        assert_eq!(split_dataset(&all, 0.2, 7).unwrap(), split_dataset(&all, 0.2, 7).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty: [&str; 0] = [];
        assert_eq!(split_dataset(&empty, 0.2, 1), Err(Error::EmptyDataset));
        assert_eq!(split_dataset(&["a"], 0.0, 1), Err(Error::InvalidFraction(0.0)));
        assert_eq!(split_dataset(&["a"], 1.0, 1), Err(Error::InvalidFraction(1.0)));
    }

    #[test]
    fn grouped_split_keeps_groups_together() {
        let items: Vec<(String, String)> = (0..40).map(|i| (format!("img{i:02}"), format!("les{}", i / 3))).collect();
        let m = split_grouped(&items, 0.2, 3).unwrap();
        let all: Vec<String> = items.iter().map(|p| p.0.clone()).collect();
        assert_partition(&m, &all);
        for (img, les) in &items {
            let side = m.valid_ids.contains(img);
            for (other, _) in items.iter().filter(|p| &p.1 == les) {
                assert_eq!(m.valid_ids.contains(other), side);
            }
        }
        assert!(m.valid_ids.len() >= 8 && m.valid_ids.len() < 8 + 3);
    }

    proptest! {
        #[test]
        fn partition_invariants(n in 1usize..300, frac_idx in 0usize..3, seed: u64) {
            let frac = [0.1, 0.2, 0.5][frac_idx];
            let all = ids(n);
            let m = split_dataset(&all, frac, seed).unwrap();
            assert_partition(&m, &all);
            prop_assert_eq!(m.valid_ids.len(), valid_count(n, frac));
        }

        #[test]
        fn input_order_is_irrelevant(n in 1usize..100, seed: u64, rot in 0usize..100) {
            let all = ids(n);
            let mut rotated = all.clone();
            rotated.rotate_left(rot % n);
            rotated.reverse();
            prop_assert_eq!(split_dataset(&all, 0.2, seed).unwrap(), split_dataset(&rotated, 0.2, seed).unwrap());
        }
    }

    #[test]
    fn manifest_json_field_names() {
        let m = split_dataset(&vec!["b", "a", "c", "d", "e"], 0.2, 1).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        for k in ["seed", "valid_fraction", "train", "valid"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }
}
