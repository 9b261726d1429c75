//! Line-oriented JSON dataset manifest.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::degrade::DegradationMode;
use crate::error::{Error, Result};

/// Scene attribute driving branch-specific data routing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Normal,
    Fog,
    #[serde(rename = "lowlight")]
    LowLight,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Normal, Attribute::Fog, Attribute::LowLight];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Normal => "normal",
            Attribute::Fog => "fog",
            Attribute::LowLight => "lowlight",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Attribute::Normal),
            "fog" => Ok(Attribute::Fog),
            "lowlight" => Ok(Attribute::LowLight),
            other => Err(Error::Config(format!("unknown attribute {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub optical: PathBuf,
    pub thermal: PathBuf,
    pub attr: Attribute,
    pub mode: DegradationMode,
    pub scale: usize,
    pub seed: u64,
}

impl ManifestRecord {
    /// Record id: the thermal file stem.
    pub fn id(&self) -> String {
        self.thermal
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory that relative record paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        DatasetManifest {
            records,
            root: root.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let rec: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                    what: "manifest".into(),
                    offset,
                    detail: e.to_string(),
                })?;
                records.push(rec);
            }
            offset += line.len() as u64;
        }
        let m = DatasetManifest::new(root, records);
        m.validate_fields()?;
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable record"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Scales, seed uniqueness; file existence is checked by [`Self::validate`].
    pub fn validate_fields(&self) -> Result<()> {
        let mut seeds = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.scale != 4 && r.scale != 8 {
                return Err(Error::Config(format!("record {i}: scale {} not in {{4, 8}}", r.scale)));
            }
            if !seeds.insert(r.seed) {
                return Err(Error::Config(format!("record {i}: duplicate seed {}", r.seed)));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_fields()?;
        for r in &self.records {
            for p in [&r.optical, &r.thermal] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Config(format!("referenced file {} does not exist", full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn filter_attr(&self, attrs: &[Attribute]) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| attrs.contains(&r.attr))
            .map(|(i, _)| i)
            .collect()
    }
}
