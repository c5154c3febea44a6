//! End-to-end runs: generate data, train, evaluate, all under one run
//! directory described by a `config.lock` file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CdnError, Result};
use crate::evaluation::{run_protocol, EvalReport, Protocol};
use crate::losses::LossBreakdown;
use crate::synthdata::{build_dataset, DatasetConfig, DatasetManifest, MANIFEST_FILE};
use crate::training::{train, TrainConfig};

pub const LOCK_FILE: &str = "config.lock";

/// Everything needed to reproduce a run. The run directory is not part of
/// it, so identical locks in different directories give identical results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub protocols: Vec<Protocol>,
}

impl RunConfig {
    pub fn standard(n_identities: u32, steps: u64, seed: u64) -> Self {
        RunConfig {
            dataset: DatasetConfig::standard(n_identities, 3, seed),
            train: TrainConfig { steps, seed, ..TrainConfig::default() },
            protocols: vec![Protocol::Intra, Protocol::Cross],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.dataset.seed > i64::MAX as u64 || self.train.seed > i64::MAX as u64 {
            return Err(CdnError::InvalidConfig("seeds must fit in a signed 64-bit integer".into()));
        }
        if self.protocols.is_empty() {
            return Err(CdnError::InvalidConfig("select at least one protocol".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CdnError::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CdnError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&fs::read_to_string(path).map_err(|e| CdnError::io(path, e))?)
    }

    pub fn write_lock(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| CdnError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| CdnError::io(&path, e))?;
        Ok(path)
    }
}

/// Layout of a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDirs {
    pub root: PathBuf,
    pub data: PathBuf,
    pub train: PathBuf,
    pub eval: PathBuf,
}

impl RunDirs {
    pub fn new(root: &Path) -> Self {
        RunDirs { root: root.to_path_buf(), data: root.join("data"), train: root.join("train"), eval: root.join("eval") }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: Vec<LossBreakdown>,
    pub reports: Vec<(Protocol, EvalReport)>,
}

/// Writes the lock, then generates data, trains and evaluates under
/// `out_dir`. An existing dataset with the same manifest location is
/// regenerated so the run depends only on the lock.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let dirs = RunDirs::new(out_dir);
    cfg.write_lock(out_dir)?;
    let manifest = build_dataset(&cfg.dataset, &dirs.data)?;
    run_on_manifest(cfg, &manifest, &dirs)
}

/// Trains and evaluates on an existing dataset.
pub fn run_on_manifest(cfg: &RunConfig, manifest: &DatasetManifest, dirs: &RunDirs) -> Result<RunOutcome> {
    let state = train(manifest, &cfg.train, &dirs.train)?;
    let mut reports = Vec::new();
    for &p in &cfg.protocols {
        reports.push((p, run_protocol(&state.bundle, manifest, p, &dirs.eval)?));
    }
    Ok(RunOutcome { history: state.history, reports })
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(&dir.join(MANIFEST_FILE))
}
