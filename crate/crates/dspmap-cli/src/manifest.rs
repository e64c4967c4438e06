//! Run manifests: every output directory records the exact configuration,
//! seed, and inputs that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

pub const BUILD_ID: &str = match option_env!("DSPMAP_BUILD_ID") {
    Some(id) => id,
    None => concat!("dspmap-", env!("CARGO_PKG_VERSION")),
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub config: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            build: BUILD_ID.to_string(),
            seed,
            inputs: Vec::new(),
            config: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<RunManifest> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
