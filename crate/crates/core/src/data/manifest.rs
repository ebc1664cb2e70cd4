use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub uri: String,
    /// Relative to the manifest root unless absolute.
    pub audio: PathBuf,
    pub annotation: PathBuf,
    pub domain: String,
    pub split: Split,
}

/// A list of annotated recordings. Relative paths resolve against `root`,
/// the directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    /// Builds a manifest after checking uri uniqueness.
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.uri.as_str()) {
                return Err(Error::Validation(format!("duplicate uri {:?}", e.uri)));
            }
        }
        Ok(CorpusManifest {
            root: root.into(),
            entries,
        })
    }

    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [uri, audio, annotation, domain, split] = fields[..] else {
                return Err(err(format!(
                    "expected 5 tab-separated fields, found {}",
                    fields.len()
                )));
            };
            if [uri, audio, annotation, domain]
                .iter()
                .any(|f| f.trim().is_empty())
            {
                return Err(err("empty field".into()));
            }
            entries.push(ManifestEntry {
                uri: uri.into(),
                audio: audio.into(),
                annotation: annotation.into(),
                domain: domain.into(),
                split: split.parse().map_err(err)?,
            });
        }
        CorpusManifest::new(root, entries)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = CorpusManifest::parse_str(&text, path)?;
        m.check_files()?;
        Ok(m)
    }

    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [self.audio_path(e), self.annotation_path(e)] {
                if !p.is_file() {
                    return Err(Error::Validation(format!(
                        "{}: missing file {}",
                        e.uri,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# uri\taudio\tannotation\tdomain\tsplit\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.uri,
                e.audio.display(),
                e.annotation.display(),
                e.domain,
                e.split
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn audio_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.audio)
    }

    pub fn annotation_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.annotation)
    }

    /// Sorted distinct domain names.
    pub fn domains(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.domain.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> CorpusManifest {
        CorpusManifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitMode {
    InDomain,
    LeaveOneOut(String),
    SingleDomain(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: CorpusManifest,
    pub dev: CorpusManifest,
    pub test: CorpusManifest,
}

pub fn make_splits(manifest: &CorpusManifest, mode: &SplitMode) -> Result<Splits> {
    let check = |k: &str| {
        if manifest.entries.iter().any(|e| e.domain == k) {
            Ok(())
        } else {
            Err(Error::Parameter(format!("unknown domain {k:?}")))
        }
    };
    let by_split = |s: Split, domain: &dyn Fn(&str) -> bool| {
        manifest.filtered(|e| e.split == s && domain(&e.domain))
    };
    Ok(match mode {
        SplitMode::InDomain => Splits {
            train: by_split(Split::Train, &|_| true),
            dev: by_split(Split::Dev, &|_| true),
            test: by_split(Split::Test, &|_| true),
        },
        SplitMode::LeaveOneOut(k) => {
            check(k)?;
            Splits {
                train: by_split(Split::Train, &|d| d != k),
                dev: by_split(Split::Dev, &|d| d != k),
                test: by_split(Split::Test, &|d| d == k),
            }
        }
        SplitMode::SingleDomain(k) => {
            check(k)?;
            Splits {
                train: by_split(Split::Train, &|d| d == k),
                dev: by_split(Split::Dev, &|d| d == k),
                test: by_split(Split::Test, &|d| d == k),
            }
        }
    })
}
