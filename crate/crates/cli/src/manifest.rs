use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::args::Command;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to repeat a run. Deliberately free of timestamps and
/// host details so two identical runs write identical manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub tool_version: String,
    pub library_version: String,
    pub checkpoint_format: u32,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub command: Command,
}

/// Run facts a command reports back for its manifest.
#[derive(Debug, Clone, Default)]
pub struct RunInfo {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

impl Manifest {
    pub fn new(command: &Command, info: RunInfo) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            library_version: flowdet::VERSION.to_string(),
            checkpoint_format: flowdet::checkpoint::FORMAT_VERSION,
            argv: std::env::args().collect(),
            seed: info.seed,
            config_hash: info.config_hash,
            command: command.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        flowdet::io::atomic_write_json(&dir.join(MANIFEST_FILE), self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| {
            flowdet::FlowDetError::Parse {
                path: path.display().to_string(),
                detail: e.to_string(),
            }
            .into()
        })
    }
}
