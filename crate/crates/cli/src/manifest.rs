//! Run manifests: everything needed to repeat a tracking run and check
//! that it produced the same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xnet_core::RunConfig;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashedFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl HashedFile {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        Ok(HashedFile { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }

    /// Fails when the file has changed since it was recorded.
    pub fn verify(&self) -> anyhow::Result<()> {
        let now = sha256_file(&self.path)?;
        anyhow::ensure!(
            now == self.sha256,
            "{} changed since the run was recorded (sha256 {} != {})",
            self.path.display(),
            now,
            self.sha256
        );
        Ok(())
    }
}

/// Switches of a `track` invocation besides the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSettings {
    pub dataset: String,
    pub threshold_px: f64,
    pub dump_heatmaps: bool,
    pub dump_flow: bool,
    pub render: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub settings: TrackSettings,
    pub inputs: Vec<HashedFile>,
    pub checkpoint: Option<HashedFile>,
    pub pgm_checkpoint: Option<HashedFile>,
    /// Output file name to sha256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn verify_inputs(&self) -> anyhow::Result<()> {
        for f in self.inputs.iter().chain(&self.checkpoint).chain(&self.pgm_checkpoint) {
            f.verify()?;
        }
        Ok(())
    }

    /// Names of recorded outputs whose hash differs in `other`.
    pub fn differing_outputs(&self, other: &RunManifest) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|(k, v)| other.outputs.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

/// Hashes every regular file under `dir` by path relative to it.
pub fn hash_tree(dir: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let rel = p.strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&p)?);
            }
        }
    }
    Ok(out)
}
