//! Multi-class and binary evaluation metrics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LesionLabel, MalignancyClass, Taxonomy, LABEL_ORDER, NUM_CLASSES};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-image class probabilities for one model variant.
///
/// `tta_n == 0` marks plain (single deterministic view) predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PredictionSetFile", into = "PredictionSetFile")]
pub struct PredictionSet {
    pub model_id: String,
    pub tta_n: usize,
    pub entries: BTreeMap<String, [f64; NUM_CLASSES]>,
}

#[derive(Serialize, Deserialize)]
struct PredictionSetFile {
    model_id: String,
    tta_n: usize,
    label_order: Vec<LesionLabel>,
    entries: BTreeMap<String, [f64; NUM_CLASSES]>,
}

impl TryFrom<PredictionSetFile> for PredictionSet {
    type Error = &'static str;

    fn try_from(f: PredictionSetFile) -> core::result::Result<Self, Self::Error> {
        if f.label_order != LABEL_ORDER {
            return Err("label_order must be [akiec, bcc, bkl, df, mel, nv, vasc]");
        }
        Ok(PredictionSet {
            model_id: f.model_id,
            tta_n: f.tta_n,
            entries: f.entries,
        })
    }
}

impl From<PredictionSet> for PredictionSetFile {
    fn from(p: PredictionSet) -> Self {
        PredictionSetFile {
            model_id: p.model_id,
            tta_n: p.tta_n,
            label_order: LABEL_ORDER.to_vec(),
            entries: p.entries,
        }
    }
}

impl PredictionSet {
    pub fn new(model_id: impl Into<String>, tta_n: usize) -> Self {
        Self {
            model_id: model_id.into(),
            tta_n,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every vector is non-negative and sums to 1 within `tol`.
    pub fn is_well_formed(&self, tol: f64) -> bool {
        self.entries
            .values()
            .all(|v| v.iter().all(|p| *p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= tol)
    }

    pub fn malignant_scores(&self, taxonomy: &Taxonomy) -> BTreeMap<String, f64> {
        self.entries
            .iter()
            .map(|(id, v)| (id.clone(), taxonomy.malignant_probability(v)))
            .collect()
    }
}

/// Square count matrix, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = Self::new(classes);
        for (t, p) in pairs {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|j| self.get(truth, j)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.classes.max(1))
    }

    /// Relabel both axes: class `i` becomes class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::new(self.classes);
        for i in 0..self.classes {
            for j in 0..self.classes {
                out.counts[perm[i] * self.classes + perm[j]] = self.get(i, j);
            }
        }
        out
    }
}

/// Seven-class confusion matrix from argmax predictions.
pub fn confusion_matrix(preds: &PredictionSet, truths: &BTreeMap<String, LesionLabel>) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for (id, probs) in &preds.entries {
        let truth = truths.get(id).ok_or_else(|| Error::MissingTruth(id.clone()))?;
        cm.add(truth.index(), argmax(probs));
    }
    Ok(cm)
}

/// Precision, recall and F1 per class plus unweighted (macro) means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn class_metrics(cm: &ConfusionMatrix) -> ClassMetrics {
    let k = cm.classes();
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let mut support = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c);
        let p = ratio(tp, cm.col_sum(c));
        let r = ratio(tp, cm.row_sum(c));
        precision.push(p);
        recall.push(r);
        f1.push(f1_score(p, r));
        support.push(cm.row_sum(c));
    }
    let mean = |v: &[f64]| if k == 0 { 0.0 } else { v.iter().sum::<f64>() / k as f64 };
    ClassMetrics {
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
        support,
    }
}

/// Binary outcome at one decision threshold, malignant as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryOperatingPoint {
    #[serde(rename = "t")]
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

/// One scored sample: malignant probability and whether it is truly malignant.
pub type ScoredSample = (f64, bool);

/// Pair scores with binary truths, failing on any score without a truth.
pub fn scored_samples(
    scores: &BTreeMap<String, f64>,
    truths: &BTreeMap<String, MalignancyClass>,
) -> Result<Vec<ScoredSample>> {
    scores
        .iter()
        .map(|(id, s)| {
            truths
                .get(id)
                .map(|t| (*s, *t == MalignancyClass::Malignant))
                .ok_or_else(|| Error::MissingTruth(id.clone()))
        })
        .collect()
}

/// Predicted malignant iff `score >= threshold`.
pub fn operating_point(samples: &[ScoredSample], threshold: f64) -> BinaryOperatingPoint {
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for &(score, malignant) in samples {
        match (score >= threshold, malignant) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    BinaryOperatingPoint {
        threshold,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        accuracy: ratio(tp + tn, tp + fp + tn + fn_),
    }
}

pub fn binary_metrics(
    scores: &BTreeMap<String, f64>,
    truths: &BTreeMap<String, MalignancyClass>,
    threshold: f64,
) -> Result<BinaryOperatingPoint> {
    Ok(operating_point(&scored_samples(scores, truths)?, threshold))
}

/// ROC polyline `(false positive rate, true positive rate)` from `(0, 0)` to
/// `(1, 1)`, one vertex per distinct score. Tied scores move along a diagonal.
pub fn roc_curve(samples: &[ScoredSample]) -> Vec<(f64, f64)> {
    let positives = samples.iter().filter(|s| s.1).count() as u64;
    let negatives = samples.len() as u64 - positives;
    let mut sorted: Vec<ScoredSample> = samples.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((ratio(fp, negatives), ratio(tp, positives)));
    }
    if curve.last() != Some(&(1.0, 1.0)) && positives > 0 && negatives > 0 {
        curve.push((1.0, 1.0));
    }
    curve
}

/// Trapezoidal area under [`roc_curve`].
///
/// Returns 0.5 when either class is absent, since no ranking information exists.
pub fn roc_auc(samples: &[ScoredSample]) -> f64 {
    let positives = samples.iter().filter(|s| s.1).count();
    if positives == 0 || positives == samples.len() {
        return 0.5;
    }
    roc_curve(samples)
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Thresholds `0, step, 2*step, ..., 1`.
pub fn threshold_grid(step: f64) -> Vec<f64> {
    assert!(step > 0.0 && step <= 1.0, "grid step must lie in (0, 1]");
    let n = libm::round(1.0 / step);
    if (n * step - 1.0).abs() < 1e-9 {
        let n = n as usize;
        (0..=n).map(|k| k as f64 / n as f64).collect()
    } else {
        let mut grid: Vec<f64> = (0..).map(|k| k as f64 * step).take_while(|t| *t <= 1.0).collect();
        if grid.last() != Some(&1.0) {
            grid.push(1.0);
        }
        grid
    }
}

/// Operating points over a threshold grid plus the exact ROC AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweepResult {
    pub auc: f64,
    pub points: Vec<BinaryOperatingPoint>,
}

impl ThresholdSweepResult {
    /// Sensitivity never rises and specificity never falls as the threshold grows.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| {
            w[0].threshold <= w[1].threshold && w[1].sensitivity <= w[0].sensitivity && w[1].specificity >= w[0].specificity
        }) && (0.0..=1.0).contains(&self.auc)
    }

    /// The grid point closest to `threshold`.
    pub fn nearest(&self, threshold: f64) -> Option<&BinaryOperatingPoint> {
        self.points
            .iter()
            .min_by(|a, b| (a.threshold - threshold).abs().total_cmp(&(b.threshold - threshold).abs()))
    }
}

pub fn threshold_sweep(samples: &[ScoredSample], grid: &[f64]) -> Result<ThresholdSweepResult> {
    if grid.windows(2).any(|w| w[0] > w[1]) || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidPolicy("threshold grid must be ascending within [0, 1]"));
    }
    Ok(ThresholdSweepResult {
        auc: roc_auc(samples),
        points: grid.iter().map(|t| operating_point(samples, *t)).collect(),
    })
}

pub fn threshold_sweep_keyed(
    scores: &BTreeMap<String, f64>,
    truths: &BTreeMap<String, MalignancyClass>,
    grid: &[f64],
) -> Result<ThresholdSweepResult> {
    threshold_sweep(&scored_samples(scores, truths)?, grid)
}
