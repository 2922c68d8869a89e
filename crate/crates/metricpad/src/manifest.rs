//! Run manifests: the resolved config plus SHA-256 digests of the config file,
//! the inputs read and the outputs written. Passing a manifest back as
//! `--config` replays the run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{io, Result};

pub const TOOL: &str = "metricpad";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_file: Option<String>,
    /// Digest of the config file bytes as read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_file_sha256: Option<String>,
    /// Digest of the canonical JSON of `config`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_config_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    /// File name → digest.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: None,
            config_file: None,
            config_file_sha256: None,
            resolved_config_sha256: None,
            config: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, file: &Path, file_bytes: &[u8], config: &RunConfig) -> Self {
        self.seed = config.seed;
        self.config_file = Some(file.display().to_string());
        self.config_file_sha256 = Some(sha256_hex(file_bytes));
        self.resolved_config_sha256 = Some(sha256_hex(&config.canonical_json()));
        self.config = Some(config.clone());
        self
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Records a file already written under the run directory.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.outputs.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest-{command}.json")
    }

    /// Writes `manifest-<command>.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let path = dir.join(Manifest::file_name(&self.command));
        let mut text = serde_json::to_string_pretty(self).map_err(|e| crate::Error::Data(e.to_string()))?;
        text.push('\n');
        io::write_bytes(&path, text.as_bytes())?;
        Ok(path)
    }
}
