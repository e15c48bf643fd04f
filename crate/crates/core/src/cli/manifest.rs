use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::checkpoint::file_sha256;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to rerun a command and check that it reproduces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub command: String,
    /// Arguments after the program name, with `--manifest` removed.
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Contents of the `--config` file, if one was given.
    pub config: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub stdout: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn hash_files(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .filter(|p| p.is_file())
        .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
        .collect()
}
