//! Converters from the public corpora's native layouts to CSV manifests.
//!
//! | kind                | layout read                                                          |
//! |---------------------|----------------------------------------------------------------------|
//! | `asvspoof19-la`     | `ASVspoof2019.LA.cm.{train.trn,dev.trl,eval.trl}.txt` protocols       |
//! | `asvspoof21-df`     | `trial_metadata.txt` (DF keys); everything is `eval`                  |
//! | `inthewild`         | `meta.csv` with `file,speaker,label` (`spoof` / `bona-fide`)          |
//! | `timit-tts+ljspeech`| directories starting with `ljspeech` are real, containing `timit` fake|
//! | `fakeorreal`        | `fake/` and `real/` directories                                       |
//! | `generic-csv`       | `real|bonafide|bona-fide|genuine` vs `fake|spoof|synthetic` directories, optional `train|dev|eval` ancestors |
//!
//! Protocol files are located anywhere below the root. Audio (`.wav`, `.flac`)
//! and embedding (`.emb`, `.embs`) files are indexed by file stem, so any
//! directory arrangement below the root works.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;
use walkdir::WalkDir;

use crate::data::{DataError, DatasetManifest, Label, Partition, Utterance};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("dataset root {0} does not exist or is not a directory")]
    RootMissing(String),
    #[error("unknown dataset kind '{0}'")]
    UnknownKind(String),
    #[error("could not find '{file}' under {root}")]
    ProtocolMissing { file: String, root: String },
    #[error("{path}: line {line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("no utterances found under {0}")]
    Empty(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Asvspoof19La,
    Asvspoof21Df,
    InTheWild,
    TimitTtsLjspeech,
    FakeOrReal,
    GenericCsv,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 6] = [
        DatasetKind::Asvspoof19La,
        DatasetKind::Asvspoof21Df,
        DatasetKind::InTheWild,
        DatasetKind::TimitTtsLjspeech,
        DatasetKind::FakeOrReal,
        DatasetKind::GenericCsv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Asvspoof19La => "asvspoof19-la",
            DatasetKind::Asvspoof21Df => "asvspoof21-df",
            DatasetKind::InTheWild => "inthewild",
            DatasetKind::TimitTtsLjspeech => "timit-tts+ljspeech",
            DatasetKind::FakeOrReal => "fakeorreal",
            DatasetKind::GenericCsv => "generic-csv",
        }
    }

    /// Dataset tag written into the manifest.
    pub fn default_tag(self) -> &'static str {
        match self {
            DatasetKind::Asvspoof19La => "asvspoof19",
            DatasetKind::Asvspoof21Df => "asvspoof21",
            DatasetKind::InTheWild => "inthewild",
            DatasetKind::TimitTtsLjspeech => "timit-tts+ljspeech",
            DatasetKind::FakeOrReal => "fakeorreal",
            DatasetKind::GenericCsv => "generic",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| IngestError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Overrides the kind's default dataset tag.
    pub dataset_tag: Option<String>,
    /// Point manifest paths at `<dir>/<id>.emb` instead of the audio files.
    pub embedding_dir: Option<PathBuf>,
}

const MEDIA_EXTENSIONS: [&str; 4] = ["wav", "flac", "emb", "embs"];

struct Tree {
    root: PathBuf,
    /// Media files in sorted walk order.
    files: Vec<PathBuf>,
    by_stem: HashMap<String, PathBuf>,
}

impl Tree {
    fn scan(root: &Path) -> Result<Self, IngestError> {
        if !root.is_dir() {
            return Err(IngestError::RootMissing(root.display().to_string()));
        }
        let mut files = Vec::new();
        let mut by_stem = HashMap::new();
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| IngestError::Io {
                path: root.display().to_string(),
                source: e.into(),
            })?;
            let path = entry.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase());
            if entry.file_type().is_file()
                && ext.is_some_and(|e| MEDIA_EXTENSIONS.contains(&e.as_str()))
            {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    by_stem.entry(stem.to_string()).or_insert_with(|| path.to_path_buf());
                }
                files.push(path.to_path_buf());
            }
        }
        Ok(Tree {
            root: root.to_path_buf(),
            files,
            by_stem,
        })
    }

    fn find_named(&self, name: &str) -> Result<PathBuf, IngestError> {
        WalkDir::new(&self.root)
            .sort_by_file_name()
            .into_iter()
            .filter_map(Result::ok)
            .find(|e| e.file_type().is_file() && e.file_name() == name)
            .map(|e| e.into_path())
            .ok_or_else(|| IngestError::ProtocolMissing {
                file: name.to_string(),
                root: self.root.display().to_string(),
            })
    }

    fn resolve(&self, stem: &str, fallback: PathBuf) -> PathBuf {
        self.by_stem.get(stem).cloned().unwrap_or(fallback)
    }

    /// Lowercased directory names between the root and `path`.
    fn ancestors(&self, path: &Path) -> Vec<String> {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.parent()
            .map(|p| {
                p.components()
                    .map(|c| c.as_os_str().to_string_lossy().to_lowercase())
                    .collect()
            })
            .unwrap_or_default()
    }

    fn relative_id(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.with_extension("")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_key(word: &str) -> Option<Label> {
    match word.to_ascii_lowercase().as_str() {
        "bonafide" | "bona-fide" | "bona_fide" | "real" | "genuine" => Some(Label::Bonafide),
        "spoof" | "fake" | "synthetic" => Some(Label::Fake),
        _ => None,
    }
}

fn asvspoof19(tree: &Tree, tag: &str) -> Result<Vec<Utterance>, IngestError> {
    let mut out = Vec::new();
    for (partition, suffix) in [
        (Partition::Train, "train.trn"),
        (Partition::Dev, "dev.trl"),
        (Partition::Eval, "eval.trl"),
    ] {
        let name = format!("ASVspoof2019.LA.cm.{suffix}.txt");
        let proto = match tree.find_named(&name) {
            Ok(p) => p,
            // A partial download (say, eval only) is still usable.
            Err(IngestError::ProtocolMissing { .. }) => continue,
            Err(e) => return Err(e),
        };
        let text = read_text(&proto)?;
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let malformed = |reason: String| IngestError::Malformed {
                path: proto.display().to_string(),
                line: i + 1,
                reason,
            };
            if f.len() < 5 {
                return Err(malformed(format!("expected 5 fields, found {}", f.len())));
            }
            let label = parse_key(f[4]).ok_or_else(|| malformed(format!("unknown key '{}'", f[4])))?;
            let id = f[1].to_string();
            let fallback = tree
                .root
                .join(format!("ASVspoof2019_LA_{partition}"))
                .join("flac")
                .join(format!("{id}.flac"));
            out.push(Utterance {
                path: tree.resolve(&id, fallback),
                id,
                label,
                dataset: tag.to_string(),
                partition,
            });
        }
    }
    if out.is_empty() {
        return Err(IngestError::ProtocolMissing {
            file: "ASVspoof2019.LA.cm.*.txt".into(),
            root: tree.root.display().to_string(),
        });
    }
    Ok(out)
}

fn asvspoof21(tree: &Tree, tag: &str) -> Result<Vec<Utterance>, IngestError> {
    let proto = tree.find_named("trial_metadata.txt")?;
    let text = read_text(&proto)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let malformed = |reason: String| IngestError::Malformed {
            path: proto.display().to_string(),
            line: i + 1,
            reason,
        };
        if f.len() < 6 {
            return Err(malformed(format!("expected at least 6 fields, found {}", f.len())));
        }
        let label = parse_key(f[5]).ok_or_else(|| malformed(format!("unknown key '{}'", f[5])))?;
        let id = f[1].to_string();
        let fallback = tree
            .root
            .join("ASVspoof2021_DF_eval")
            .join("flac")
            .join(format!("{id}.flac"));
        out.push(Utterance {
            path: tree.resolve(&id, fallback),
            id,
            label,
            dataset: tag.to_string(),
            partition: Partition::Eval,
        });
    }
    Ok(out)
}

fn in_the_wild(tree: &Tree, tag: &str) -> Result<Vec<Utterance>, IngestError> {
    let meta = tree.find_named("meta.csv")?;
    let base = meta.parent().unwrap_or(&tree.root).to_path_buf();
    let text = read_text(&meta)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let malformed = |reason: String| IngestError::Malformed {
            path: meta.display().to_string(),
            line: i + 1,
            reason,
        };
        if f.len() != 3 {
            return Err(malformed(format!("expected 3 columns, found {}", f.len())));
        }
        let label = parse_key(f[2]).ok_or_else(|| malformed(format!("unknown label '{}'", f[2])))?;
        let file = Path::new(f[0]);
        let id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| malformed("empty file name".into()))?;
        out.push(Utterance {
            path: tree.resolve(&id, base.join(file)),
            id,
            label,
            dataset: tag.to_string(),
            partition: Partition::Eval,
        });
    }
    Ok(out)
}

/// Folder-labelled corpora: `classify` maps the lowercased ancestor
/// directory names of a file to its label, or skips the file.
fn by_folders<F>(tree: &Tree, tag: &str, classify: F) -> Vec<Utterance>
where
    F: Fn(&[String]) -> Option<Label>,
{
    tree.files
        .iter()
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "wav" | "flac"))
        })
        .filter_map(|p| {
            let dirs = tree.ancestors(p);
            let label = classify(&dirs)?;
            let partition = dirs
                .iter()
                .rev()
                .find_map(|d| d.parse::<Partition>().ok())
                .unwrap_or(Partition::Eval);
            Some(Utterance {
                id: tree.relative_id(p),
                path: p.clone(),
                label,
                dataset: tag.to_string(),
                partition,
            })
        })
        .collect()
}

/// Builds a manifest from a dataset root. Fails before producing anything
/// if the root is missing or nothing usable is found.
pub fn ingest(
    kind: DatasetKind,
    root: &Path,
    opts: &IngestOptions,
) -> Result<DatasetManifest, IngestError> {
    let tree = Tree::scan(root)?;
    let tag = opts
        .dataset_tag
        .clone()
        .unwrap_or_else(|| kind.default_tag().to_string());

    let mut entries = match kind {
        DatasetKind::Asvspoof19La => asvspoof19(&tree, &tag)?,
        DatasetKind::Asvspoof21Df => asvspoof21(&tree, &tag)?,
        DatasetKind::InTheWild => in_the_wild(&tree, &tag)?,
        DatasetKind::TimitTtsLjspeech => by_folders(&tree, &tag, |dirs| {
            dirs.iter().find_map(|d| {
                if d.starts_with("ljspeech") {
                    Some(Label::Bonafide)
                } else if d.contains("timit") {
                    Some(Label::Fake)
                } else {
                    None
                }
            })
        }),
        DatasetKind::FakeOrReal => by_folders(&tree, &tag, |dirs| {
            dirs.iter().rev().find_map(|d| match d.as_str() {
                "fake" => Some(Label::Fake),
                "real" => Some(Label::Bonafide),
                _ => None,
            })
        }),
        DatasetKind::GenericCsv => by_folders(&tree, &tag, |dirs| {
            dirs.iter().rev().find_map(|d| parse_key(d))
        }),
    };
    if entries.is_empty() {
        return Err(IngestError::Empty(root.display().to_string()));
    }
    if let Some(dir) = &opts.embedding_dir {
        for u in &mut entries {
            u.path = dir.join(format!("{}.emb", u.id));
        }
    }
    Ok(DatasetManifest::new(tag, entries)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn touch(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"").unwrap();
    }

    #[test]
    fn kinds_parse() {
        for k in DatasetKind::ALL {
            assert_eq!(k.as_str().parse::<DatasetKind>().unwrap(), k);
        }
        assert!(matches!(
            "librispeech".parse::<DatasetKind>(),
            Err(IngestError::UnknownKind(_))
        ));
    }

    #[test]
    fn generic_tree() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("toy");
        touch(&root.join("real/a.wav"));
        touch(&root.join("fake/b.wav"));
        touch(&root.join("train/spoof/c.wav"));
        touch(&root.join("notes.txt"));
        let m = ingest(DatasetKind::GenericCsv, &root, &IngestOptions::default()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.class_counts(), (1, 2));
        let c = m.entries().iter().find(|u| u.id == "train/spoof/c").unwrap();
        assert_eq!(c.partition, Partition::Train);
        assert_eq!(c.label, Label::Fake);
    }

    #[test]
    fn timit_and_ljspeech_merge() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch(&root.join("LJSpeech-1.1/wavs/LJ001-0001.wav"));
        touch(&root.join("LJSpeech-1.1/wavs/LJ001-0002.wav"));
        touch(&root.join("TIMIT-TTS/single_speaker/glow/LJ001-0001.wav"));
        let m = ingest(DatasetKind::TimitTtsLjspeech, root, &IngestOptions::default()).unwrap();
        assert_eq!(m.class_counts(), (2, 1));
        assert!(m.entries().iter().all(|u| u.dataset == "timit-tts+ljspeech"));
        assert_eq!(m.datasets(), vec!["timit-tts+ljspeech"]);
    }

    #[test]
    fn asvspoof19_protocols() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let protos = root.join("LA/ASVspoof2019_LA_cm_protocols");
        fs::create_dir_all(&protos).unwrap();
        fs::write(
            protos.join("ASVspoof2019.LA.cm.train.trn.txt"),
            "LA_0079 LA_T_1138215 - - bonafide\nLA_0079 LA_T_1271820 - A01 spoof\n",
        )
        .unwrap();
        fs::write(
            protos.join("ASVspoof2019.LA.cm.eval.trl.txt"),
            "LA_0039 LA_E_2834763 - A11 spoof\n",
        )
        .unwrap();
        touch(&root.join("LA/ASVspoof2019_LA_train/wav/LA_T_1138215.wav"));
        let m = ingest(DatasetKind::Asvspoof19La, root, &IngestOptions::default()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.split(Partition::Train).class_counts(), (1, 1));
        assert_eq!(m.split(Partition::Eval).len(), 1);
        let first = &m.entries()[0];
        assert!(first.path.ends_with("wav/LA_T_1138215.wav"));
        assert!(m.entries()[1].path.ends_with("flac/LA_T_1271820.flac"));
    }

    #[test]
    fn asvspoof21_keys_and_embedding_paths() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("keys/DF/CM")).unwrap();
        fs::write(
            root.join("keys/DF/CM/trial_metadata.txt"),
            "LA_0043 DF_E_2000011 nocodec asvspoof A14 spoof notrim progress traditional_vocoder - - - -\n\
             LA_0023 DF_E_2000013 mp3m4a asvspoof - bonafide notrim eval - - - - -\n",
        )
        .unwrap();
        let opts = IngestOptions {
            dataset_tag: None,
            embedding_dir: Some(PathBuf::from("/emb/df")),
        };
        let m = ingest(DatasetKind::Asvspoof21Df, root, &opts).unwrap();
        assert_eq!(m.class_counts(), (1, 1));
        assert_eq!(m.entries()[0].path, PathBuf::from("/emb/df/DF_E_2000011.emb"));
    }

    #[test]
    fn in_the_wild_meta() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("release_in_the_wild");
        fs::create_dir_all(&root).unwrap();
        fs::write(
            root.join("meta.csv"),
            "file,speaker,label\n0.wav,Alec Guinness,spoof\n1.wav,Alec Guinness,bona-fide\n",
        )
        .unwrap();
        let m = ingest(DatasetKind::InTheWild, &root, &IngestOptions::default()).unwrap();
        assert_eq!(m.class_counts(), (1, 1));
        assert_eq!(m.entries()[0].path, root.join("0.wav"));
    }

    #[test]
    fn fake_or_real_folders() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("for-original");
        touch(&root.join("testing/fake/x.wav"));
        touch(&root.join("testing/real/y.wav"));
        touch(&root.join("training/real/z.wav"));
        let m = ingest(DatasetKind::FakeOrReal, &root, &IngestOptions::default()).unwrap();
        assert_eq!(m.class_counts(), (2, 1));
        assert!(m.entries().iter().all(|u| u.partition == Partition::Eval));
    }

    #[test]
    fn missing_root_and_empty_tree() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(
                DatasetKind::GenericCsv,
                &dir.path().join("nope"),
                &IngestOptions::default()
            ),
            Err(IngestError::RootMissing(_))
        ));
        assert!(matches!(
            ingest(DatasetKind::GenericCsv, dir.path(), &IngestOptions::default()),
            Err(IngestError::Empty(_))
        ));
        assert!(matches!(
            ingest(DatasetKind::InTheWild, dir.path(), &IngestOptions::default()),
            Err(IngestError::ProtocolMissing { .. })
        ));
    }
}
