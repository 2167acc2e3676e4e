//! JSON dataset manifest (`"schema": 1`).
//!
//! ```json
//! {
//!   "schema": 1,
//!   "root": ".",
//!   "shape": [24, 24, 24],
//!   "spacing_mm": [1.0, 1.0, 1.0],
//!   "contrasts": ["c1", "c2"],
//!   "entries": [
//!     {"subject_id": "s0000", "contrast_id": "c1", "timepoint": 0,
//!      "path": "images/s0000_c1_t0.nii", "health_status": true, "has_tissue_map": true}
//!   ],
//!   "splits": {"train": ["s0000"], "val": [], "test": []},
//!   "subjects": [{"subject_id": "s0000", "tissue_map": "labels/s0000_tissue.nii", "scale": 0.91}]
//! }
//! ```
//!
//! `root` is resolved relative to the directory containing the manifest.
//! `subjects` is optional per-subject metadata: the ground-truth tissue map
//! and the synthetic anatomical scale factor used as a regression target.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("split leak: subject `{subject}` appears in {first} and {second}")]
    SplitLeak { subject: String, first: Split, second: Split },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub contrast_id: String,
    pub timepoint: u32,
    pub path: String,
    pub health_status: Option<bool>,
    pub has_tissue_map: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectInfo {
    pub subject_id: String,
    #[serde(default)]
    pub tissue_map: Option<String>,
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: u32,
    pub root: String,
    pub shape: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub contrasts: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub splits: Splits,
    #[serde(default)]
    pub subjects: Vec<SubjectInfo>,
    /// Directory the manifest was loaded from; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(shape: [usize; 3], spacing_mm: [f32; 3], contrasts: Vec<String>) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            root: ".".into(),
            shape,
            spacing_mm,
            contrasts,
            entries: Vec::new(),
            splits: Splits::default(),
            subjects: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    /// Parses and structurally validates a manifest without touching files.
    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let m: Self = serde_json::from_str(text).map_err(|e| ManifestError::SchemaViolation(e.to_string()))?;
        m.validate_structure()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Loads, validates, and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.to_owned(), source })?;
        let mut m = Self::from_json(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_files()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        self.validate_structure()?;
        fs::write(path, self.to_json()).map_err(|source| ManifestError::Io { path: path.to_owned(), source })
    }

    /// Absolute (or base-relative) directory that entry paths are relative to.
    pub fn root_dir(&self) -> PathBuf {
        self.base_dir.join(&self.root)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root_dir().join(rel)
    }

    pub fn validate_structure(&self) -> Result<(), ManifestError> {
        let violation = |msg: String| Err(ManifestError::SchemaViolation(msg));
        if self.schema != SCHEMA_VERSION {
            return violation(format!("schema {} is not supported (expected {SCHEMA_VERSION})", self.schema));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return violation(format!("shape {:?} has a zero extent", self.shape));
        }
        if self.spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return violation(format!("spacing_mm {:?} must be positive", self.spacing_mm));
        }
        let contrasts: BTreeSet<&str> = self.contrasts.iter().map(String::as_str).collect();
        if contrasts.len() != self.contrasts.len() {
            return violation("duplicate contrast id".into());
        }

        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for split in Split::ALL {
            for s in self.splits.get(split) {
                if let Some(&first) = split_of.get(s.as_str()) {
                    if first == split {
                        return violation(format!("subject `{s}` listed twice in {split}"));
                    }
                    return Err(ManifestError::SplitLeak { subject: s.clone(), first, second: split });
                }
                split_of.insert(s, split);
            }
        }

        let subjects: BTreeMap<&str, &SubjectInfo> =
            self.subjects.iter().map(|s| (s.subject_id.as_str(), s)).collect();
        if subjects.len() != self.subjects.len() {
            return violation("duplicate subject in `subjects`".into());
        }

        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !contrasts.contains(e.contrast_id.as_str()) {
                return violation(format!("entry {} uses undeclared contrast `{}`", e.path, e.contrast_id));
            }
            if !split_of.contains_key(e.subject_id.as_str()) {
                return violation(format!("subject `{}` has entries but no split", e.subject_id));
            }
            if !seen.insert((e.subject_id.as_str(), e.contrast_id.as_str(), e.timepoint)) {
                return violation(format!(
                    "duplicate entry for ({}, {}, t{})",
                    e.subject_id, e.contrast_id, e.timepoint
                ));
            }
            if e.has_tissue_map && subjects.get(e.subject_id.as_str()).and_then(|s| s.tissue_map.as_ref()).is_none() {
                return violation(format!("entry {} claims a tissue map but subject has none", e.path));
            }
        }
        let with_entries: BTreeSet<&str> = self.entries.iter().map(|e| e.subject_id.as_str()).collect();
        for s in &self.splits.train {
            if !with_entries.contains(s.as_str()) {
                return violation(format!("train subject `{s}` has no entries"));
            }
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<(), ManifestError> {
        let paths = self
            .entries
            .iter()
            .map(|e| e.path.as_str())
            .chain(self.subjects.iter().filter_map(|s| s.tissue_map.as_deref()));
        for rel in paths {
            let p = self.resolve(rel);
            if !p.is_file() {
                return Err(ManifestError::MissingFile(p));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, subject: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.splits.get(s).iter().any(|x| x == subject))
    }

    /// Distinct subject ids in entry order.
    pub fn subject_ids(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.entries.iter().map(|e| e.subject_id.as_str()).filter(|s| seen.insert(*s)).collect()
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        let members: BTreeSet<&str> = self.splits.get(split).iter().map(String::as_str).collect();
        self.entries.iter().filter(move |e| members.contains(e.subject_id.as_str()))
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectInfo> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(s: &str, c: &str) -> ManifestEntry {
        ManifestEntry {
            subject_id: s.into(),
            contrast_id: c.into(),
            timepoint: 0,
            path: format!("{s}_{c}.nii"),
            health_status: Some(true),
            has_tissue_map: false,
        }
    }

    fn base() -> DatasetManifest {
        DatasetManifest::new([4, 4, 4], [1.0; 3], vec!["c1".into(), "c2".into()])
    }

    #[test]
    fn subject_in_two_splits_is_a_leak() {
        let mut m = base();
        m.entries.push(entry("s1", "c1"));
        m.splits.train.push("s1".into());
        m.splits.test.push("s1".into());
        match m.validate_structure() {
            Err(ManifestError::SplitLeak { subject, first, second }) => {
                assert_eq!(subject, "s1");
                assert_eq!((first, second), (Split::Train, Split::Test));
            }
            other => panic!("expected SplitLeak, got {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = DatasetManifest::from_json(&base().to_json()).unwrap();
        assert!(m.subject_ids().is_empty());
    }

    #[test]
    fn missing_key_and_wrong_type_are_schema_violations() {
        let mut v: serde_json::Value = serde_json::from_str(&base().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("contrasts");
        assert!(matches!(DatasetManifest::from_json(&v.to_string()), Err(ManifestError::SchemaViolation(_))));
        let mut v: serde_json::Value = serde_json::from_str(&base().to_json()).unwrap();
        v["shape"] = serde_json::json!("big");
        assert!(matches!(DatasetManifest::from_json(&v.to_string()), Err(ManifestError::SchemaViolation(_))));
        let mut v: serde_json::Value = serde_json::from_str(&base().to_json()).unwrap();
        v["schema"] = serde_json::json!(2);
        assert!(matches!(DatasetManifest::from_json(&v.to_string()), Err(ManifestError::SchemaViolation(_))));
    }

    #[test]
    fn duplicate_identity_is_rejected() {
        let mut m = base();
        m.entries.push(entry("s1", "c1"));
        m.entries.push(entry("s1", "c1"));
        m.splits.train.push("s1".into());
        assert!(matches!(m.validate_structure(), Err(ManifestError::SchemaViolation(_))));
    }

    #[test]
    fn load_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = base();
        m.entries.push(entry("s1", "c1"));
        m.splits.train.push("s1".into());
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(ManifestError::MissingFile(_))));
        std::fs::write(dir.path().join("s1_c1.nii"), b"").unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.entries, m.entries);
        assert_eq!(loaded.split_of("s1"), Some(Split::Train));
    }
}
