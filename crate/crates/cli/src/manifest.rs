use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Record written next to the outputs of every successful run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    /// Every flag after defaults were applied; enough to rerun.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub jobs: Option<usize>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    /// Hash of the canonical JSON form of `config`.
    pub fn hash_config(config: &serde_json::Value) -> String {
        pdmp_core::sha256_hex(&serde_json::to_vec(config).expect("JSON value serializes"))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

/// `dir/manifest.json` for directory outputs, `<stem>.manifest.json` beside
/// a file output.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        return out.join("manifest.json");
    }
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.manifest.json"))
}
