//! Per-command run manifests. A manifest holds the resolved configuration
//! and SHA-256 digests of every input and output file; it has no timestamps,
//! so identical runs write identical manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const RUN_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    /// Command-specific facts such as test-set document ids.
    pub details: Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of a file, or of every file directly inside a directory in name order.
pub fn digest_path(path: &Path, label: &str) -> CliResult<Vec<FileDigest>> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::io(path, e))?;
        names.retain(|p| p.is_file());
        names.sort();
        names
            .iter()
            .map(|p| {
                let name = p.file_name().expect("directory entry has a name").to_string_lossy();
                Ok(FileDigest { path: format!("{label}/{name}"), sha256: sha256_file(p)? })
            })
            .collect()
    } else {
        Ok(vec![FileDigest { path: label.to_string(), sha256: sha256_file(path)? }])
    }
}

/// Hashes `inputs` (as given) and `outputs` (relative to `config.output_dir`)
/// and writes `manifest.json` into the output directory.
pub fn write_manifest(
    command: &str,
    config: &RunConfig,
    inputs: &[&Path],
    outputs: &[&str],
    details: Value,
) -> CliResult<RunManifest> {
    let out = config.output_dir();
    let mut input_digests = Vec::new();
    for p in inputs {
        input_digests.extend(digest_path(p, &p.to_string_lossy())?);
    }
    let mut output_digests = Vec::new();
    for rel in outputs {
        output_digests.extend(digest_path(&out.join(rel), rel)?);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        seed: config.seed(),
        config: config.clone(),
        inputs: input_digests,
        outputs: output_digests,
        details,
    };
    let path = out.join(RUN_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}
