//! `manifest.json`: what a command ran with, enough to repeat it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| hytnas::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let digest = Sha256::digest(&bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").unwrap();
    }
    Ok(s)
}

/// SHA-256 of every input file; directories contribute each regular file
/// they directly contain, except their own manifest.
pub fn hash_inputs(paths: &[&Path]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for path in paths {
        if path.is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| hytnas::Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
                .collect();
            files.sort();
            for f in files {
                out.insert(f.display().to_string(), sha256_file(&f)?);
            }
        } else {
            out.insert(path.display().to_string(), sha256_file(path)?);
        }
    }
    Ok(out)
}

pub fn write(
    out: &Path,
    command: &str,
    argv: &[String],
    config: Option<serde_json::Value>,
    seeds: serde_json::Value,
    inputs: &[&Path],
) -> CliResult<()> {
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": argv.get(1..).unwrap_or(&[]),
        "config": config,
        "seeds": seeds,
        "inputs": hash_inputs(inputs)?,
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    hytnas::checkpoint::write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(())
}
