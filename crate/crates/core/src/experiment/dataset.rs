//! Phantom dataset generation.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{gen_phantom, write_svol, CaseEntry, Manifest, PhantomConfig, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_cases: usize,
    pub val_cases: usize,
    pub phantom: PhantomConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            train_cases: 40,
            val_cases: 10,
            phantom: PhantomConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: DatasetConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.phantom.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Writes `train_cases + val_cases` phantoms as SVOL pairs plus
/// `manifest.toml` into `out_dir` and returns the manifest.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    config.phantom.validate()?;
    if config.train_cases + config.val_cases == 0 {
        return Err(Error::Config("the dataset needs at least one case".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let total = config.train_cases + config.val_cases;
    let cases: Vec<CaseEntry> = (0..total)
        .into_par_iter()
        .map(|i| {
            let p = gen_phantom(&config.phantom, config.seed, i as u64)?;
            let id = format!("case_{i:03}");
            let entry = CaseEntry {
                image: format!("{id}_image.svol").into(),
                label: format!("{id}_label.svol").into(),
                split: if i < config.train_cases { Split::Train } else { Split::Val },
                thickness_mm: Some(p.thickness_mm as f64),
                id,
            };
            write_svol(&p.image, out_dir.join(&entry.image))?;
            write_svol(&p.labels, out_dir.join(&entry.label))?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(cases)?;
    manifest.save(out_dir.join("manifest.toml"))?;
    Manifest::load(out_dir.join("manifest.toml"))
}
