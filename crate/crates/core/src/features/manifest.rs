use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{N_SINGERS, N_TECHNIQUES, N_VOWELS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Scale,
    Arpeggios,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordingMeta {
    pub id: String,
    pub singer: usize,
    pub technique: usize,
    pub vowel: usize,
    pub style: Style,
}

/// One CSV row: `id,path,singer,technique,vowel,style,split`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Audio file (for `prepare`) or `MEL1` cache, relative to the manifest.
    pub path: PathBuf,
    pub singer: usize,
    pub technique: usize,
    pub vowel: usize,
    pub style: Style,
    pub split: Split,
}

impl ManifestEntry {
    pub fn meta(&self) -> RecordingMeta {
        RecordingMeta {
            id: self.id.clone(),
            singer: self.singer,
            technique: self.technique,
            vowel: self.vowel,
            style: self.style,
        }
    }
}

/// Declared class counts that label indices must respect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub singers: usize,
    pub techniques: usize,
    pub vowels: usize,
}

impl Default for ClassCounts {
    fn default() -> Self {
        Self {
            singers: N_SINGERS,
            techniques: N_TECHNIQUES,
            vowels: N_VOWELS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.check_unique_ids()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        if e.path.is_absolute() {
            e.path.clone()
        } else {
            self.base_dir.join(&e.path)
        }
    }

    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate id `{}`", e.id)));
            }
        }
        Ok(())
    }

    pub fn check_labels(&self, counts: ClassCounts) -> Result<()> {
        for e in &self.entries {
            if e.singer >= counts.singers || e.technique >= counts.techniques || e.vowel >= counts.vowels {
                return Err(Error::InvalidManifest(format!(
                    "`{}` has labels ({}, {}, {}) outside declared counts ({}, {}, {})",
                    e.id, e.singer, e.technique, e.vowel, counts.singers, counts.techniques, counts.vowels
                )));
            }
        }
        Ok(())
    }

    /// Smallest class counts that cover every label in the manifest.
    pub fn observed_counts(&self) -> ClassCounts {
        let max = |f: fn(&ManifestEntry) -> usize| self.entries.iter().map(f).max().map_or(0, |m| m + 1);
        ClassCounts {
            singers: max(|e| e.singer),
            techniques: max(|e| e.technique),
            vowels: max(|e| e.vowel),
        }
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)?;
        }
        if self.entries.is_empty() {
            w.write_record(["id", "path", "singer", "technique", "vowel", "style", "split"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::nn::checkpoint::write_atomic(path, self.to_csv_string()?.as_bytes())
    }

    /// Parse CSV text; paths resolve against `base_dir`.
    pub fn from_csv_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers()?.clone();
        let expected = ["id", "path", "singer", "technique", "vowel", "style", "split"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::InvalidManifest(format!(
                "header must be `{}`, got `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| Error::InvalidManifest(e.to_string()))?;
        Self::new(entries, base_dir)
    }

    /// Read a manifest file and check that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::from_csv_str(&text, base)?;
        for e in &m.entries {
            let p = m.resolve(e);
            if !p.exists() {
                return Err(Error::InvalidManifest(format!(
                    "`{}` references missing file {}",
                    e.id,
                    p.display()
                )));
            }
        }
        Ok(m)
    }
}
