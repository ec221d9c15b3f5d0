//! Run manifest: per-stage input/output digests, seeds and timing.
//!
//! Re-running a stage with identical inputs reproduces identical output
//! digests; the determinism check compares the digest maps of two runs
//! (timing fields are excluded from the comparison).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use canopy_ledger::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub version: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub duration_ms: u64,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&std::fs::read(p)?)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        std::fs::write(
            run_dir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(self)?,
        )?;
        Ok(())
    }

    /// Output digests of every stage, keyed `stage/artifact`, for
    /// reproducibility comparisons.
    pub fn output_digests(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (stage, rec) in &self.stages {
            for (name, digest) in &rec.outputs {
                out.insert(format!("{stage}/{name}"), digest.clone());
            }
        }
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn digest_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Digest every file under a directory (relative path -> digest).
pub fn digest_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    use rayon::prelude::*;
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let digests: Vec<(String, String)> = files
        .par_iter()
        .map(|p| {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            digest_file(p).map(|d| (rel, d))
        })
        .collect::<Result<_>>()?;
    Ok(digests.into_iter().collect())
}

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
