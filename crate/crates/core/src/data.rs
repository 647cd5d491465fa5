//! CSV manifests: one row per utterance with its label and partition.
//!
//! Format: UTF-8, header `id,path,label,dataset,partition`, plain commas,
//! no quoting. Label 0 is bona fide, 1 is fake.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::fsutil;

pub const MANIFEST_HEADER: &str = "id,path,label,dataset,partition";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: expected header '{MANIFEST_HEADER}', found '{found}'")]
    BadHeader { path: String, found: String },
    #[error("{path}: row {row}: {reason}")]
    MalformedRow {
        path: String,
        row: usize,
        reason: String,
    },
    #[error("{path}: duplicate id '{id}' at rows {first_row} and {second_row}")]
    DuplicateId {
        path: String,
        id: String,
        first_row: usize,
        second_row: usize,
    },
    #[error("manifest '{manifest}' has no {class} samples")]
    EmptyClass { manifest: String, class: Label },
    #[error("field '{0}' contains a comma, quote or newline")]
    Unencodable(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Bonafide = 0,
    Fake = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Bonafide),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bona fide",
            Label::Fake => "fake",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Dev,
    Eval,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Dev, Partition::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Dev => "dev",
            Partition::Eval => "eval",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "dev" => Ok(Partition::Dev),
            "eval" => Ok(Partition::Eval),
            other => Err(format!("unknown partition '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    /// Audio file or precomputed embedding, depending on the provider.
    pub path: PathBuf,
    pub label: Label,
    pub dataset: String,
    pub partition: Partition,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    entries: Vec<Utterance>,
    class_counts: (usize, usize),
}

fn count_classes(entries: &[Utterance]) -> (usize, usize) {
    let fake = entries.iter().filter(|u| u.label.is_fake()).count();
    (entries.len() - fake, fake)
}

impl DatasetManifest {
    /// Builds a manifest, rejecting duplicate ids (rows are 1-based, header excluded).
    pub fn new(name: impl Into<String>, entries: Vec<Utterance>) -> Result<Self, DataError> {
        let name = name.into();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, u) in entries.iter().enumerate() {
            if let Some(first) = seen.insert(&u.id, i + 1) {
                return Err(DataError::DuplicateId {
                    path: name.clone(),
                    id: u.id.clone(),
                    first_row: first,
                    second_row: i + 1,
                });
            }
        }
        let class_counts = count_classes(&entries);
        Ok(DatasetManifest {
            name,
            entries,
            class_counts,
        })
    }

    pub fn entries(&self) -> &[Utterance] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(n_real, n_fake)`.
    pub fn class_counts(&self) -> (usize, usize) {
        self.class_counts
    }

    /// Entries of one partition, in manifest order.
    pub fn split(&self, partition: Partition) -> DatasetManifest {
        let entries: Vec<Utterance> = self
            .entries
            .iter()
            .filter(|u| u.partition == partition)
            .cloned()
            .collect();
        let class_counts = count_classes(&entries);
        DatasetManifest {
            name: self.name.clone(),
            entries,
            class_counts,
        }
    }

    /// Entries whose path does not exist on disk.
    pub fn missing_paths(&self) -> Vec<&Utterance> {
        self.entries.iter().filter(|u| !u.path.exists()).collect()
    }

    /// Distinct dataset tags in order of first appearance.
    pub fn datasets(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for u in &self.entries {
            if !tags.contains(&u.dataset) {
                tags.push(u.dataset.clone());
            }
        }
        tags
    }

    pub fn to_csv(&self) -> Result<String, DataError> {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for u in &self.entries {
            let path = u.path.to_string_lossy();
            for field in [u.id.as_str(), &path, u.dataset.as_str()] {
                if field.contains([',', '"', '\n', '\r']) {
                    return Err(DataError::Unencodable(field.to_string()));
                }
            }
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                u.id,
                path,
                u.label.as_u8(),
                u.dataset,
                u.partition
            ));
        }
        Ok(out)
    }

    pub fn parse(text: &str, name: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim_end()).unwrap_or("");
        let header = header.strip_prefix('\u{feff}').unwrap_or(header);
        if header != MANIFEST_HEADER {
            return Err(DataError::BadHeader {
                path: name.to_string(),
                found: header.to_string(),
            });
        }

        let malformed = |row: usize, reason: String| DataError::MalformedRow {
            path: name.to_string(),
            row,
            reason,
        };
        let mut entries = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (idx, line) in lines {
            let row = idx + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if line.contains('"') {
                return Err(malformed(row, "quoted fields are not supported".into()));
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(malformed(
                    row,
                    format!("expected 5 columns, found {}", fields.len()),
                ));
            }
            let id = fields[0].to_string();
            if id.is_empty() {
                return Err(malformed(row, "empty id".into()));
            }
            let label = fields[2]
                .parse::<u8>()
                .ok()
                .and_then(Label::from_u8)
                .ok_or_else(|| malformed(row, format!("label '{}' is not 0 or 1", fields[2])))?;
            let partition = fields[4].parse::<Partition>().map_err(|e| malformed(row, e))?;
            if let Some(first) = seen.insert(id.clone(), row) {
                return Err(DataError::DuplicateId {
                    path: name.to_string(),
                    id,
                    first_row: first,
                    second_row: row,
                });
            }
            entries.push(Utterance {
                id,
                path: PathBuf::from(fields[1]),
                label,
                dataset: fields[3].to_string(),
                partition,
            });
        }
        let class_counts = count_classes(&entries);
        Ok(DatasetManifest {
            name: name.to_string(),
            entries,
            class_counts,
        })
    }
}

/// Reads a manifest; row numbers in errors are file line numbers (header = 1).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut m = DatasetManifest::parse(&text, &path.display().to_string())?;
    m.name = name;
    Ok(m)
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let text = m.to_csv()?;
    fsutil::write_atomic(path, |f| f.write_all(text.as_bytes())).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `n_fake / n_real`.
pub fn imbalance_report(m: &DatasetManifest) -> Result<f64, DataError> {
    let (real, fake) = m.class_counts();
    for (n, class) in [(real, Label::Bonafide), (fake, Label::Fake)] {
        if n == 0 {
            return Err(DataError::EmptyClass {
                manifest: m.name.clone(),
                class,
            });
        }
    }
    Ok(fake as f64 / real as f64)
}
