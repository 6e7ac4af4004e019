//! HAM10000 metadata parsing, the folder-per-class corpus and split manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use dermoscan_core::split::SplitManifest;
use dermoscan_core::taxonomy::{LesionLabel, LABEL_ORDER};
use serde::{Deserialize, Serialize};

use crate::error::{read_error, write_error, Error, Result};

/// One metadata row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub lesion_id: String,
    pub image_id: String,
    pub label: LesionLabel,
    pub dx_type: String,
    pub age: Option<f64>,
    pub sex: Option<String>,
    pub localization: Option<String>,
}

pub const METADATA_COLUMNS: [&str; 7] = ["lesion_id", "image_id", "dx", "dx_type", "age", "sex", "localization"];

fn optional_text(v: Option<&str>) -> Option<String> {
    match v.map(str::trim) {
        None | Some("") | Some("unknown") => None,
        Some(s) => Some(s.to_string()),
    }
}

/// Parse metadata CSV text (header row required).
///
/// `image_id` and `dx` are required columns; the others may be absent, and
/// empty or `unknown` cells become `None`. Row numbers in errors are file
/// line numbers.
pub fn parse_metadata(csv_text: &str) -> Result<Vec<LesionRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim_start_matches('\u{feff}') == name);
    let image_col = col("image_id").ok_or(Error::MissingColumn("image_id"))?;
    let dx_col = col("dx").ok_or(Error::MissingColumn("dx"))?;
    let (lesion_col, dx_type_col, age_col, sex_col, loc_col) =
        (col("lesion_id"), col("dx_type"), col("age"), col("sex"), col("localization"));

    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |c: Option<usize>| c.and_then(|c| row.get(c));
        let image_id = row.get(image_col).unwrap_or("").to_string();
        if image_id.is_empty() {
            return Err(Error::BadRow { row: line, message: "empty image_id".into() });
        }
        let dx = row.get(dx_col).unwrap_or("");
        let label = dx.parse::<LesionLabel>().map_err(|_| Error::UnknownLabel { row: line, label: dx.to_string() })?;
        let age = match get(age_col).map(str::trim) {
            None | Some("") => None,
            Some(a) => {
                let v: f64 = a.parse().map_err(|_| Error::BadRow { row: line, message: format!("bad age `{a}`") })?;
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::BadRow { row: line, message: format!("negative age `{a}`") });
                }
                Some(v)
            }
        };
        if !seen.insert(image_id.clone()) {
            return Err(Error::DuplicateImage(image_id));
        }
        records.push(LesionRecord {
            lesion_id: get(lesion_col).unwrap_or("").to_string(),
            image_id,
            label,
            dx_type: get(dx_type_col).unwrap_or("").to_string(),
            age,
            sex: optional_text(get(sex_col)),
            localization: optional_text(get(loc_col)),
        });
    }
    Ok(records)
}

pub fn read_metadata(path: &Path) -> Result<Vec<LesionRecord>> {
    parse_metadata(&fs::read_to_string(path).map_err(read_error(path))?)
}

/// Serialize records with the standard column set; absent values are empty.
pub fn serialize_metadata(records: &[LesionRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METADATA_COLUMNS)?;
    for r in records {
        let age = r.age.map(|a| format!("{a:?}")).unwrap_or_default();
        w.write_record([
            r.lesion_id.as_str(),
            r.image_id.as_str(),
            r.label.code(),
            r.dx_type.as_str(),
            age.as_str(),
            r.sex.as_deref().unwrap_or(""),
            r.localization.as_deref().unwrap_or(""),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Per-label counts; every label is present, absent ones with 0.
pub fn class_counts(records: &[LesionRecord]) -> BTreeMap<LesionLabel, usize> {
    let mut counts: BTreeMap<LesionLabel, usize> = LABEL_ORDER.iter().map(|l| (*l, 0)).collect();
    for r in records {
        *counts.entry(r.label).or_default() += 1;
    }
    counts
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FolderReport {
    pub copied: usize,
    pub missing: Vec<String>,
}

/// Copy `<image_id>.jpg` from the first of `image_dirs` that has it to
/// `out_dir/<label>/<image_id>.jpg`.
pub fn build_class_folders(records: &[LesionRecord], image_dirs: &[PathBuf], out_dir: &Path) -> Result<FolderReport> {
    for label in LABEL_ORDER {
        let dir = out_dir.join(label.code());
        fs::create_dir_all(&dir).map_err(write_error(&dir))?;
    }
    let mut report = FolderReport::default();
    for r in records {
        let name = format!("{}.jpg", r.image_id);
        match image_dirs.iter().map(|d| d.join(&name)).find(|p| p.is_file()) {
            Some(src) => {
                let dst = out_dir.join(r.label.code()).join(&name);
                fs::copy(&src, &dst).map_err(write_error(&dst))?;
                report.copied += 1;
            }
            None => report.missing.push(r.image_id.clone()),
        }
    }
    Ok(report)
}

/// One corpus image: its label (the folder it sits in) and location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub label: LesionLabel,
    pub path: PathBuf,
}

/// Index of a folder-per-class corpus keyed by image id (file stem).
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: BTreeMap<String, CorpusEntry>,
}

impl Corpus {
    pub fn scan(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Read {
                path: root.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
            });
        }
        let mut entries = BTreeMap::new();
        for label in LABEL_ORDER {
            let dir = root.join(label.code());
            if !dir.is_dir() {
                continue;
            }
            for entry in fs::read_dir(&dir).map_err(read_error(&dir))? {
                let path = entry.map_err(read_error(&dir))?.path();
                let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
                if !matches!(ext.as_deref(), Some("jpg" | "jpeg" | "png")) {
                    continue;
                }
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    if entries.insert(stem.to_string(), CorpusEntry { label, path: path.clone() }).is_some() {
                        return Err(Error::DuplicateImage(stem.to_string()));
                    }
                }
            }
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> BTreeMap<String, LesionLabel> {
        self.entries.iter().map(|(id, e)| (id.clone(), e.label)).collect()
    }

    /// Ids in `ids` that the corpus lacks.
    pub fn missing<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Vec<String> {
        ids.into_iter().filter(|id| !self.entries.contains_key(*id)).cloned().collect()
    }

    pub fn require(&self, manifest: &SplitManifest) -> Result<()> {
        let missing = self.missing(manifest.train_ids.iter().chain(&manifest.valid_ids));
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::CorpusIncomplete(missing))
        }
    }
}

pub fn write_manifest(manifest: &SplitManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(path, json + "\n").map_err(write_error(path))
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(read_error(path))?;
    Ok(serde_json::from_str(&text)?)
}
