use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Written as `<output>.manifest.json` beside every output.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub config: &'a RunConfig,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn hashes(paths: &[&Path]) -> std::io::Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn write_manifest(subcommand: &str, inputs: &[&Path], outputs: &[&Path], config: &RunConfig) -> msnimble::Result<()> {
    let m = Manifest {
        tool: "msnimble",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
        config,
    };
    let text = serde_json::to_string_pretty(&m)?;
    std::fs::write(manifest_path(outputs[0]), text + "\n")?;
    Ok(())
}
