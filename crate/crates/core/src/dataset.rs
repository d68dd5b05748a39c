//! Dataset manifests, the seven-class diagnosis taxonomy and one-vs-rest task views.
//!
//! A manifest is a comma-delimited UTF-8 file with the header `image_id,path,label`.
//! Paths are relative to the manifest's directory. The label column is empty for
//! unlabeled splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Expected header of a manifest file.
pub const MANIFEST_HEADER: [&str; 3] = ["image_id", "path", "label"];

/// Image counts of the public ISIC 2018 lesion-diagnosis splits.
pub const ISIC2018_TRAIN_SIZE: usize = 10015;
pub const ISIC2018_VALIDATION_SIZE: usize = 193;
pub const ISIC2018_TEST_SIZE: usize = 1512;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: malformed csv: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("empty manifest")]
    Empty,
    #[error("bad manifest header {found:?}, expected image_id,path,label")]
    BadHeader { found: Vec<String> },
    #[error("line {line}: expected 3 columns, found {found}")]
    BadRow { line: u64, found: usize },
    #[error("line {line}: empty image_id")]
    EmptyImageId { line: u64 },
    #[error("line {line}: duplicate image_id {image_id:?}")]
    DuplicateImageId { line: u64, image_id: String },
    #[error("line {line}: unknown class code {code:?}")]
    UnknownClass { line: u64, code: String },
    #[error("line {line}: train entry {image_id:?} has no label")]
    MissingLabel { line: u64, image_id: String },
    #[error("unknown split {0:?} (expected train, validation or test)")]
    UnknownSplit(String),
    #[error("manifest has no labeled entries")]
    NoLabeledEntries,
}

/// One of the seven lesion diagnoses, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum DiagnosisClass {
    Mel,
    Nv,
    Bcc,
    Akiec,
    Bkl,
    Df,
    Vasc,
}

impl DiagnosisClass {
    /// Canonical order; drives the column order of prediction files.
    pub const ALL: [DiagnosisClass; 7] = [
        DiagnosisClass::Mel,
        DiagnosisClass::Nv,
        DiagnosisClass::Bcc,
        DiagnosisClass::Akiec,
        DiagnosisClass::Bkl,
        DiagnosisClass::Df,
        DiagnosisClass::Vasc,
    ];

    pub const COUNT: usize = 7;

    pub fn code(self) -> &'static str {
        match self {
            DiagnosisClass::Mel => "MEL",
            DiagnosisClass::Nv => "NV",
            DiagnosisClass::Bcc => "BCC",
            DiagnosisClass::Akiec => "AKIEC",
            DiagnosisClass::Bkl => "BKL",
            DiagnosisClass::Df => "DF",
            DiagnosisClass::Vasc => "VASC",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DiagnosisClass::Mel => "melanoma",
            DiagnosisClass::Nv => "melanocytic nevus",
            DiagnosisClass::Bcc => "basal cell carcinoma",
            DiagnosisClass::Akiec => "actinic keratosis",
            DiagnosisClass::Bkl => "benign keratosis",
            DiagnosisClass::Df => "dermatofibroma",
            DiagnosisClass::Vasc => "vascular lesion",
        }
    }

    /// Position in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == code)
    }
}

impl fmt::Display for DiagnosisClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for DiagnosisClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_code(s.trim()).ok_or_else(|| format!("unknown class code {s:?}"))
    }
}

impl From<DiagnosisClass> for String {
    fn from(c: DiagnosisClass) -> String {
        c.code().to_string()
    }
}

impl TryFrom<String> for DiagnosisClass {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// The seven classes in canonical order.
pub fn class_taxonomy() -> Vec<DiagnosisClass> {
    DiagnosisClass::ALL.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Size of the corresponding ISIC 2018 split.
    pub fn isic2018_size(self) -> usize {
        match self {
            Split::Train => ISIC2018_TRAIN_SIZE,
            Split::Validation => ISIC2018_VALIDATION_SIZE,
            Split::Test => ISIC2018_TEST_SIZE,
        }
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub file_path: String,
    pub label: Option<DiagnosisClass>,
}

/// A validated, immutable manifest for one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    split: Split,
    root: PathBuf,
}

impl DatasetManifest {
    /// Builds a manifest from in-memory entries, applying the same validation as
    /// [`load_manifest`]. `root` is the directory image paths are relative to.
    pub fn from_entries(
        entries: Vec<ManifestEntry>,
        split: Split,
        root: impl Into<PathBuf>,
    ) -> Result<Self, DatasetError> {
        if entries.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            // line numbers count the header as line 1
            let line = i as u64 + 2;
            if e.image_id.is_empty() {
                return Err(DatasetError::EmptyImageId { line });
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(DatasetError::DuplicateImageId {
                    line,
                    image_id: e.image_id.clone(),
                });
            }
            if split == Split::Train && e.label.is_none() {
                return Err(DatasetError::MissingLabel {
                    line,
                    image_id: e.image_id.clone(),
                });
            }
        }
        Ok(Self {
            entries,
            split,
            root: root.into(),
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.entries.iter().filter(|e| e.label.is_some()).count()
    }

    pub fn class_counts(&self) -> BTreeMap<DiagnosisClass, usize> {
        let mut counts = BTreeMap::new();
        for label in self.entries.iter().filter_map(|e| e.label) {
            *counts.entry(label).or_insert(0) += 1;
        }
        counts
    }

    /// Absolute (or root-joined) location of an entry's image.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.file_path)
    }
}

/// Reads and validates a manifest file.
pub fn load_manifest(path: impl AsRef<Path>, split: Split) -> Result<DatasetManifest, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = parse_manifest(&text, split, root).map_err(|e| match e {
        DatasetError::Csv { source, .. } => DatasetError::Csv {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })?;
    let stats = manifest.class_counts();
    log::debug!(
        "loaded {} manifest {}: {} entries, {} labeled, {} classes",
        split.name(),
        path.display(),
        manifest.len(),
        manifest.labeled_count(),
        stats.len()
    );
    Ok(manifest)
}

/// Parses manifest text. Exposed for callers that already hold the contents.
pub fn parse_manifest(text: &str, split: Split, root: impl Into<PathBuf>) -> Result<DatasetManifest, DatasetError> {
    if text.trim().is_empty() {
        return Err(DatasetError::Empty);
    }
    let csv_err = |source| DatasetError::Csv {
        path: PathBuf::new(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(DatasetError::BadHeader {
            found: header.iter().map(str::to_string).collect(),
        });
    }
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(DatasetError::BadRow {
                line,
                found: record.len(),
            });
        }
        let code = &record[2];
        let label = if code.is_empty() {
            None
        } else {
            Some(
                DiagnosisClass::from_code(code).ok_or_else(|| DatasetError::UnknownClass {
                    line,
                    code: code.to_string(),
                })?,
            )
        };
        entries.push(ManifestEntry {
            image_id: record[0].to_string(),
            file_path: record[1].to_string(),
            label,
        });
    }
    DatasetManifest::from_entries(entries, split, root)
}

/// Writes a manifest in the documented format.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let wrap = |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    };
    writer.write_record(MANIFEST_HEADER).map_err(wrap)?;
    for e in entries {
        writer
            .write_record([
                e.image_id.as_str(),
                e.file_path.as_str(),
                e.label.map_or("", DiagnosisClass::code),
            ])
            .map_err(wrap)?;
    }
    writer.flush().map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryEntry {
    pub image_id: String,
    pub file_path: PathBuf,
    pub label: u8,
}

/// One-vs-rest relabeling of the labeled part of a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryTaskView {
    pub target: DiagnosisClass,
    pub entries: Vec<BinaryEntry>,
}

impl BinaryTaskView {
    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.label == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.entries.len() - self.positives()
    }

    /// True when one side of the task is empty, so AUC is undefined.
    pub fn is_degenerate(&self) -> bool {
        let p = self.positives();
        p == 0 || p == self.entries.len()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// Relabels `manifest` for the `target`-vs-rest task. Unlabeled entries are dropped.
///
/// A task with no positives (or no negatives) is returned with a logged warning.
pub fn derive_binary_task(manifest: &DatasetManifest, target: DiagnosisClass) -> Result<BinaryTaskView, DatasetError> {
    let entries: Vec<BinaryEntry> = manifest
        .entries()
        .iter()
        .filter_map(|e| {
            e.label.map(|label| BinaryEntry {
                image_id: e.image_id.clone(),
                file_path: manifest.resolve(e),
                label: u8::from(label == target),
            })
        })
        .collect();
    if entries.is_empty() {
        return Err(DatasetError::NoLabeledEntries);
    }
    let view = BinaryTaskView { target, entries };
    if view.is_degenerate() {
        log::warn!(
            "degenerate task {target}: {} positives of {} entries, AUC is undefined",
            view.positives(),
            view.entries.len()
        );
    }
    Ok(view)
}
