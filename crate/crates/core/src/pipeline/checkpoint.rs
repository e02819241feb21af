//! Checkpoint directories: `config.txt`, `manifest.txt` with one
//! `name file extents` line per parameter, and one tensor file each.

use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::network::Network;

use super::config::RunConfig;
use super::tensorfile::{self, Dtype};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

fn plain_file_name(f: &str) -> bool {
    !f.is_empty() && f != "." && f != ".." && !f.contains(['/', '\\']) && !f.starts_with('.')
}

/// One entry per non-blank line; names are unique and files are plain
/// names inside the checkpoint directory.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, file, extents] = parts[..] else {
            return Err(Error::Format(format!(
                "manifest line {}: expected 3 fields",
                lineno + 1
            )));
        };
        if !plain_file_name(file) {
            return Err(Error::Format(format!(
                "manifest line {}: bad file name {file:?}",
                lineno + 1
            )));
        }
        let shape = if extents == "-" {
            Vec::new()
        } else {
            extents
                .split(',')
                .map(|e| e.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| {
                    Error::Format(format!(
                        "manifest line {}: bad extents {extents:?}",
                        lineno + 1
                    ))
                })?
        };
        if out.iter().any(|e| e.name == name) {
            return Err(Error::Format(format!(
                "manifest line {}: repeated name {name}",
                lineno + 1
            )));
        }
        out.push(ManifestEntry {
            name: name.to_string(),
            file: file.to_string(),
            shape,
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| {
            let ext = if e.shape.is_empty() {
                "-".to_string()
            } else {
                e.shape
                    .iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            format!("{} {} {}\n", e.name, e.file, ext)
        })
        .collect()
}

/// Writes parameters losslessly (f64 payloads) alongside the config.
pub fn save(dir: &Path, config: &RunConfig, net: &Network) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), config.to_text())?;
    let mut entries = Vec::with_capacity(net.store().len());
    for (_, name, t) in net.store().iter() {
        let file = format!("{name}.dft");
        tensorfile::write(&dir.join(&file), t, Dtype::F64)?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    std::fs::write(dir.join("manifest.txt"), format_manifest(&entries))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(RunConfig, Network)> {
    let config = RunConfig::parse(&std::fs::read_to_string(dir.join("config.txt"))?)?;
    let entries = parse_manifest(&std::fs::read_to_string(dir.join("manifest.txt"))?)?;
    let mut store = ParamStore::new();
    for e in entries {
        let t = tensorfile::read(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::mismatch(&e.shape, t.shape()));
        }
        store.add(e.name, t)?;
    }
    let net = Network::from_store(config.sr.clone(), config.dims.len(), store)?;
    Ok((config, net))
}
