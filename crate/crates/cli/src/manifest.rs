//! `manifest.json`: config hash, stage log and a content hash for every
//! artifact a stage wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use sbi_vfm::io::file_sha256;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub config_hash: String,
    pub task: String,
    pub method: String,
    pub stages: Vec<StageRecord>,
    /// Run-relative path to hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn load_or_new(run_dir: &Path, cfg: &ExperimentConfig) -> CliResult<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let mut m = if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::from_io(&path, e))?;
            serde_json::from_str(&text).map_err(sbi_vfm::Error::from)?
        } else {
            RunManifest::default()
        };
        m.software_version = env!("CARGO_PKG_VERSION").to_string();
        m.config_hash = cfg.hash();
        m.task = cfg.task.to_string();
        m.method = cfg.method.as_str().to_string();
        Ok(m)
    }

    /// Record a finished stage and hash its outputs.
    pub fn record(&mut self, run_dir: &Path, stage: &str, seed: u64, started: f64, files: &[PathBuf]) -> CliResult<()> {
        self.stages.retain(|s| s.stage != stage);
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            seed,
            started_unix: started,
            finished_unix: now_unix(),
        });
        for f in files {
            let rel = f.strip_prefix(run_dir).unwrap_or(f);
            let key = rel.to_string_lossy().replace('\\', "/");
            self.artifacts.insert(key, file_sha256(f)?);
        }
        Ok(())
    }

    pub fn save(&self, run_dir: &Path) -> CliResult<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(sbi_vfm::Error::from)? + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::from_io(&path, e))
    }

    /// Artifacts whose current content no longer matches the recorded hash.
    pub fn stale_artifacts(&self, run_dir: &Path) -> CliResult<Vec<String>> {
        let mut stale = Vec::new();
        for (rel, hash) in &self.artifacts {
            let p = run_dir.join(rel);
            if !p.is_file() || &file_sha256(&p)? != hash {
                stale.push(rel.clone());
            }
        }
        Ok(stale)
    }
}
