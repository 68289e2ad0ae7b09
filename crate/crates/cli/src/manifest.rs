use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::hex_digest;
use crate::error::Result;

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config_sha256: &'a str,
    outputs: Vec<OutputEntry>,
}

/// Writes `<dir>/<command>.manifest.json` listing each output with its hash.
/// File names are relative to `dir` when possible so the manifest does not
/// depend on where the run happened.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    config_sha256: &str,
    outputs: &[PathBuf],
) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(outputs.len());
    for p in outputs {
        let name = p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.clone());
        entries.push(OutputEntry {
            file: name.to_string_lossy().replace('\\', "/"),
            sha256: hex_digest(&fs::read(p)?),
        });
    }
    let m = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_sha256,
        outputs: entries,
    };
    let path = dir.join(format!("{command}.manifest.json"));
    fs::write(
        &path,
        serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n",
    )?;
    Ok(path)
}
