use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::write_json_atomic;
use crate::{Error, Result};

/// Completion record of a stage, `stages/<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Hash of the settings and upstream outputs the stage read.
    pub inputs: String,
    /// Hash of every file the stage wrote.
    pub outputs: String,
    #[serde(default)]
    pub summary: serde_json::Value,
}

pub(crate) fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(value)?)))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hash over the relative paths and contents of every file under `paths`
/// (files or directories, relative to `root`). Missing paths hash as absent.
pub fn hash_outputs(root: &Path, paths: &[&str]) -> Result<String> {
    let mut files = Vec::new();
    for rel in paths {
        let p = root.join(rel);
        if p.is_dir() {
            collect_files(&p, &mut files)?;
        } else if p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    let digests: Vec<(String, String)> = files
        .par_iter()
        .map(|f| {
            let rel = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
            Ok((rel, hash_file(f)?))
        })
        .collect::<Result<_>>()?;
    let mut hasher = Sha256::new();
    for (rel, digest) in &digests {
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update(digest.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex(&hasher.finalize()))
}

/// Stage records of one workspace.
#[derive(Debug, Clone)]
pub struct StageStore {
    root: PathBuf,
}

impl StageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StageStore { root: root.into() }
    }

    fn path(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }

    pub fn load(&self, stage: &str) -> Result<Option<StageRecord>> {
        let path = self.path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_slice(&bytes)?))
    }

    pub fn save(&self, record: &StageRecord) -> Result<()> {
        write_json_atomic(&self.path(&record.stage), record, true)
    }

    pub fn clear(&self, stage: &str) -> Result<()> {
        let path = self.path(stage);
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// The record of `stage` if it was completed with `inputs` and its
    /// outputs are still unchanged on disk.
    pub fn completed(&self, stage: &str, inputs: &str, outputs: &[&str]) -> Result<Option<StageRecord>> {
        match self.load(stage)? {
            Some(r) if r.inputs == inputs && r.outputs == hash_outputs(&self.root, outputs)? => Ok(Some(r)),
            _ => Ok(None),
        }
    }
}
