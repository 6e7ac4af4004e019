//! HAM10000 diagnosis labels and their benign/malignant grouping.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const NUM_CLASSES: usize = 7;

/// One of the seven dermoscopic diagnosis categories.
///
/// Discriminants follow [`LABEL_ORDER`], the alphabetical order that indexes
/// every probability vector, logit vector and confusion-matrix axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionLabel {
    Akiec = 0,
    Bcc = 1,
    Bkl = 2,
    Df = 3,
    Mel = 4,
    Nv = 5,
    Vasc = 6,
}

pub const LABEL_ORDER: [LesionLabel; NUM_CLASSES] = [
    LesionLabel::Akiec,
    LesionLabel::Bcc,
    LesionLabel::Bkl,
    LesionLabel::Df,
    LesionLabel::Mel,
    LesionLabel::Nv,
    LesionLabel::Vasc,
];

impl LesionLabel {
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        LABEL_ORDER.get(index).copied()
    }

    /// Short dataset code, e.g. `"akiec"`.
    pub fn code(self) -> &'static str {
        match self {
            LesionLabel::Akiec => "akiec",
            LesionLabel::Bcc => "bcc",
            LesionLabel::Bkl => "bkl",
            LesionLabel::Df => "df",
            LesionLabel::Mel => "mel",
            LesionLabel::Nv => "nv",
            LesionLabel::Vasc => "vasc",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            LesionLabel::Akiec => "actinic keratoses and intraepithelial carcinoma / Bowen's disease",
            LesionLabel::Bcc => "basal cell carcinoma",
            LesionLabel::Bkl => "benign keratosis-like lesions",
            LesionLabel::Df => "dermatofibroma",
            LesionLabel::Mel => "melanoma",
            LesionLabel::Nv => "melanocytic nevi",
            LesionLabel::Vasc => "vascular lesions",
        }
    }
}

impl fmt::Display for LesionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for LesionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LABEL_ORDER
            .iter()
            .copied()
            .find(|l| l.code() == s.trim())
            .ok_or_else(|| Error::UnknownLabel(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MalignancyClass {
    Benign,
    Malignant,
}

impl fmt::Display for MalignancyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MalignancyClass::Benign => "benign",
            MalignancyClass::Malignant => "malignant",
        })
    }
}

/// Maps each label to a [`MalignancyClass`].
///
/// Serialized as `{"malignant": ["akiec", "bcc", "mel"]}`; every label not
/// listed is benign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TaxonomyFile", into = "TaxonomyFile")]
pub struct Taxonomy {
    malignant: [bool; NUM_CLASSES],
}

impl Default for Taxonomy {
    /// melanoma, basal cell carcinoma and intraepithelial carcinoma.
    fn default() -> Self {
        Self::from_malignant(&[LesionLabel::Mel, LesionLabel::Bcc, LesionLabel::Akiec])
    }
}

impl Taxonomy {
    pub fn from_malignant(labels: &[LesionLabel]) -> Self {
        let mut malignant = [false; NUM_CLASSES];
        for l in labels {
            malignant[l.index()] = true;
        }
        Self { malignant }
    }

    pub fn class_of(&self, label: LesionLabel) -> MalignancyClass {
        if self.malignant[label.index()] {
            MalignancyClass::Malignant
        } else {
            MalignancyClass::Benign
        }
    }

    pub fn is_malignant(&self, label: LesionLabel) -> bool {
        self.malignant[label.index()]
    }

    pub fn malignant_labels(&self) -> Vec<LesionLabel> {
        LABEL_ORDER.iter().copied().filter(|l| self.is_malignant(*l)).collect()
    }

    /// Sum of the probability mass on malignant labels.
    ///
    /// `probs` is indexed by [`LABEL_ORDER`]; the result is clamped to `[0, 1]`
    /// to absorb float round-off.
    pub fn malignant_probability(&self, probs: &[f64]) -> f64 {
        let s: f64 = probs
            .iter()
            .zip(self.malignant.iter())
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .sum();
        s.clamp(0.0, 1.0)
    }

    pub fn benign_probability(&self, probs: &[f64]) -> f64 {
        let s: f64 = probs
            .iter()
            .zip(self.malignant.iter())
            .filter(|(_, m)| !**m)
            .map(|(p, _)| *p)
            .sum();
        s.clamp(0.0, 1.0)
    }
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    malignant: Vec<LesionLabel>,
}

impl From<TaxonomyFile> for Taxonomy {
    fn from(f: TaxonomyFile) -> Self {
        Taxonomy::from_malignant(&f.malignant)
    }
}

impl From<Taxonomy> for TaxonomyFile {
    fn from(t: Taxonomy) -> Self {
        TaxonomyFile { malignant: t.malignant_labels() }
    }
}
