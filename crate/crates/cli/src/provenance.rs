//! Stage provenance: content hashes of the effective config, the inputs
//! and the outputs. A stage whose config and input hashes match its
//! recorded provenance is up to date and skipped.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Other(format!("cannot hash {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a JSON-serializable value via its canonical serde output.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serializable").as_bytes())
}

impl Provenance {
    pub fn path(stage_dir: &Path) -> std::path::PathBuf {
        stage_dir.join("provenance.json")
    }

    pub fn load(stage_dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(Self::path(stage_dir)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, stage_dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(Self::path(stage_dir), text)
            .map_err(|e| CliError::Other(format!("cannot write provenance: {e}")))?;
        Ok(())
    }

    pub fn matches(&self, config_hash: &str, input_hashes: &BTreeMap<String, String>) -> bool {
        self.config_hash == config_hash && &self.input_hashes == input_hashes
    }
}

/// Hashes every regular file under `dir` (one level plus subdirectories),
/// excluding the provenance record itself.
pub fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d)
            .map_err(|e| CliError::Other(format!("cannot list {}: {e}", d.display())))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::Other(e.to_string()))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "provenance.json") {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hash_file(&path)?);
            }
        }
    }
    Ok(out)
}
