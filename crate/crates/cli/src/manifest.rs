//! `manifest.json`: what a run was given and what it produced.

use std::path::{Path, PathBuf};

use anyhow::Context;
use imr_core::engine::JobSpec;
use imr_core::faults::sha256_file;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apps::{AppKind, AppParams};
use crate::runner::Mode;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Digest of everything that determines the output.
    pub run_id: String,
    pub binary: String,
    pub mode: Mode,
    pub app: AppKind,
    pub params: AppParams,
    pub seed: u64,
    pub spec: JobSpec,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub recoveries: u64,
}

impl RunManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: Mode,
        app: AppKind,
        params: AppParams,
        seed: u64,
        spec: JobSpec,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> anyhow::Result<Self> {
        let inputs = inputs.iter().map(|p| FileDigest::of(p)).collect::<anyhow::Result<Vec<_>>>()?;
        let outputs = outputs.iter().map(|p| FileDigest::of(p)).collect::<anyhow::Result<Vec<_>>>()?;
        let key = serde_json::to_vec(&(mode, app, &params, seed, &spec, inputs.iter().map(|d| &d.sha256).collect::<Vec<_>>()))?;
        let run_id = hex::encode(&Sha256::digest(&key)[..8]);
        Ok(RunManifest {
            run_id,
            binary: concat!("imr ", env!("CARGO_PKG_VERSION")).to_string(),
            mode,
            app,
            params,
            seed,
            spec,
            inputs,
            outputs,
            iterations: None,
            converged: None,
            recoveries: 0,
        })
    }

    /// Loads the manifest of a run directory or of its `output/` child.
    pub fn load(run: &Path) -> anyhow::Result<Self> {
        let mut path = run.join(MANIFEST);
        if !path.exists() {
            if let Some(parent) = run.parent() {
                path = parent.join(MANIFEST);
            }
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
