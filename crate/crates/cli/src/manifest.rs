//! `MANIFEST.json`: every artifact mapped to the stage that wrote it, that
//! stage's configuration hash, the plan seed and the file's content hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "MANIFEST.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Keyed by path relative to the run root, `/`-separated.
    pub files: BTreeMap<String, ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| PipelineError::io(&path, e))
    }

    pub fn stage_files(&self, stage: &str) -> impl Iterator<Item = (&String, &ManifestEntry)> {
        let stage = stage.to_string();
        self.files.iter().filter(move |(_, e)| e.stage == stage)
    }

    pub fn forget_stage(&mut self, stage: &str) {
        self.files.retain(|_, e| e.stage != stage);
    }

    /// Records every file below `root/stage` under `stage`.
    pub fn record_stage(&mut self, root: &Path, stage: &str, config_hash: &str, seed: u64) -> Result<()> {
        self.forget_stage(stage);
        let dir = root.join(stage);
        for entry in WalkDir::new(&dir).sort_by_file_name() {
            let entry = entry.map_err(|e| PipelineError::io(&dir, e.into()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry
                .path()
                .strip_prefix(root)
                .expect("walk stays below root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            self.files.insert(
                rel,
                ManifestEntry {
                    stage: stage.to_string(),
                    config_hash: config_hash.to_string(),
                    seed,
                    sha256: sha256_file(entry.path())?,
                },
            );
        }
        Ok(())
    }

    /// True when `stage` was recorded under `config_hash` and every one of
    /// its files still exists with the recorded content.
    pub fn is_current(&self, root: &Path, stage: &str, config_hash: &str) -> Result<bool> {
        let mut any = false;
        for (rel, e) in self.stage_files(stage) {
            any = true;
            let path = root.join(rel);
            if e.config_hash != config_hash || !path.exists() || sha256_file(&path)? != e.sha256 {
                return Ok(false);
            }
        }
        Ok(any)
    }

    /// Fails unless every file recorded for `stage` matches its hash.
    pub fn verify_stage(&self, root: &Path, stage: &str) -> Result<()> {
        let mut any = false;
        for (rel, e) in self.stage_files(stage) {
            any = true;
            let path = root.join(rel);
            if !path.exists() || sha256_file(&path)? != e.sha256 {
                return Err(PipelineError::Tampered {
                    stage: stage.to_string(),
                    path: rel.clone(),
                });
            }
        }
        if any {
            Ok(())
        } else {
            Err(PipelineError::MissingUpstream {
                stage: "?".into(),
                needs: stage.to_string(),
            })
        }
    }

    /// Content hashes of every file `stage` produced, in path order.
    pub fn stage_digest(&self, stage: &str) -> Vec<(String, String)> {
        self.stage_files(stage).map(|(p, e)| (p.clone(), e.sha256.clone())).collect()
    }
}
