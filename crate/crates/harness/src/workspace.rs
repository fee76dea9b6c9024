//! Dataset preparation shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use comchain::data::{generate, split, Dataset, DatasetManifest, MANIFEST_FILE};

use crate::config::ExperimentConfig;

pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    pub dir: PathBuf,
}

/// Generated data directory of a config.
pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("data")
}

/// The full manifest: loaded from `data.manifest`, reused from `<out>/data`, or generated there.
pub fn full_manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    if let Some(path) = &cfg.data.manifest {
        return Ok(DatasetManifest::load(path)?);
    }
    let dir = data_dir(cfg);
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        let m = DatasetManifest::load(&path)?;
        if m.spec != cfg.data.spec {
            bail!("{} was generated from a different data spec", path.display());
        }
        return Ok(m);
    }
    generate(&cfg.data.spec, &dir).with_context(|| format!("generating data into {}", dir.display()))
}

/// Train and evaluation splits, written next to the full manifest as `train.json` and `eval.json`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Splits> {
    let full = full_manifest(cfg)?;
    let parts = split(&full, &cfg.data.fractions, cfg.data.split_seed)?;
    let dir = full.dir.clone();
    for (part, name) in parts.iter().zip(["train.json", "eval.json"]) {
        part.save(&dir.join(name))?;
    }
    Ok(Splits {
        train: Dataset::open(&parts[0])?,
        eval: Dataset::open(&parts[1])?,
        dir,
    })
}

/// Opens a split manifest such as `<out>/data/eval.json`.
pub fn open_split(path: &Path) -> Result<Dataset> {
    let m = DatasetManifest::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Dataset::open(&m)?)
}
