use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{open_slide, AnnotationSet, ClassLabel, SlidePyramid};
use crate::error::{read_json, write_json, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
const SLIDES_DIR: &str = "slides";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub source: String,
    pub split: Split,
    pub label: ClassLabel,
    pub has_annotations: bool,
}

/// A dataset: `manifest.json` at the root plus `slides/<slide_id>/` per
/// entry. The manifest file itself is a bare JSON list of entries.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest {
            root: root.into(),
            entries,
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.slide_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate slide_id {}", e.slide_id)));
            }
        }
        Ok(())
    }

    /// Loads `<root>/manifest.json` (or the given file), verifying ids are
    /// unique and that annotated entries have their annotation file.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let entries: Vec<ManifestEntry> = read_json(&file)?;
        let m = DatasetManifest::new(root, entries)?;
        for e in &m.entries {
            if e.has_annotations {
                let ann = m.annotations_path(&e.slide_id);
                if !ann.is_file() {
                    return Err(Error::Integrity(format!(
                        "slide {} is marked annotated but {} is missing",
                        e.slide_id,
                        ann.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        write_json(&self.root.join(MANIFEST_FILE), &self.entries)
    }

    pub fn slide_dir(&self, slide_id: &str) -> PathBuf {
        self.root.join(SLIDES_DIR).join(slide_id)
    }

    pub fn annotations_path(&self, slide_id: &str) -> PathBuf {
        self.slide_dir(slide_id).join(ANNOTATIONS_FILE)
    }

    pub fn open(&self, slide_id: &str) -> Result<SlidePyramid> {
        open_slide(&self.slide_dir(slide_id))
    }

    /// Annotations for an entry; empty when the entry is not annotated.
    pub fn annotations(&self, entry: &ManifestEntry) -> Result<AnnotationSet> {
        if entry.has_annotations {
            AnnotationSet::load(&self.annotations_path(&entry.slide_id))
        } else {
            Ok(AnnotationSet::empty(entry.slide_id.clone()))
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, slide_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.slide_id == slide_id)
    }

    /// Sources in first-appearance order.
    pub fn sources(&self, split: Split) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in self.split(split) {
            if !out.contains(&e.source) {
                out.push(e.source.clone());
            }
        }
        out
    }
}
