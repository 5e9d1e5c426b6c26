//! Dataset manifest: a TOML list of cases with image and label paths.
//!
//! Relative paths are resolved against the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}, expected train or val"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thickness_mm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub cases: Vec<CaseEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn new(cases: Vec<CaseEntry>) -> Result<Self> {
        let m = Manifest {
            cases,
            root: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cases {
            if c.id.is_empty() || !seen.insert(c.id.as_str()) {
                return Err(Error::Format(format!("case id {:?} is empty or repeated", c.id)));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_toml_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Directory that relative case paths are resolved against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn image_path(&self, case: &CaseEntry) -> PathBuf {
        self.resolve(&case.image)
    }

    pub fn label_path(&self, case: &CaseEntry) -> PathBuf {
        self.resolve(&case.label)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn case(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, split: Split) -> CaseEntry {
        CaseEntry {
            id: id.into(),
            image: format!("{id}_image.svol").into(),
            label: format!("{id}_label.svol").into(),
            split,
            thickness_mm: Some(2.0),
        }
    }

    #[test]
    fn round_trip_and_resolution() {
        let m = Manifest::new(vec![entry("a", Split::Train), entry("b", Split::Val)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.toml");
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back.cases, m.cases);
        assert_eq!(back.image_path(&back.cases[0]), dir.path().join("a_image.svol"));
        assert_eq!(back.split(Split::Val).map(|c| c.id.as_str()).collect::<Vec<_>>(), ["b"]);
        assert!(back.case("b").is_some());
    }

    #[test]
    fn rejects_bad_manifests() {
        assert!(Manifest::new(vec![entry("a", Split::Train), entry("a", Split::Val)]).is_err());
        let text = "[[cases]]\nid = \"x\"\nimage = \"i\"\nlabel = \"l\"\nsplit = \"test\"\n";
        assert!(matches!(Manifest::from_toml_str(text), Err(Error::Format(_))));
        assert!("val".parse::<Split>().is_ok());
        assert!("holdout".parse::<Split>().is_err());
    }
}
