//! Output directories and the manifest each command leaves in them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigRef {
    pub source: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub config: Option<ConfigRef>,
    pub seed: Option<u64>,
    pub device: String,
    /// Budget as requested and as resolved, when the command trains.
    pub budget: Option<serde_json::Value>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<FileDigest>,
    pub summary: serde_json::Value,
    pub notes: Vec<String>,
}

impl ExperimentManifest {
    pub fn new(command: &str, device: String) -> Self {
        ExperimentManifest {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: None,
            seed: None,
            device,
            budget: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            summary: serde_json::Value::Null,
            notes: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest { path: path.display().to_string(), sha256: digest_path(path)? });
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content digest of a file, or of a directory as the digest of its sorted
/// `name digest` lines (recursively).
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        let mut listing = String::new();
        for e in entries {
            let name = e.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            listing.push_str(&format!("{name} {}\n", digest_path(&e)?));
        }
        Ok(sha256_hex(listing.as_bytes()))
    } else {
        Ok(sha256_hex(&std::fs::read(path)?))
    }
}

/// An output directory that refuses to overwrite earlier results unless
/// forced; forcing removes the artifacts the previous manifest listed.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<(String, String)>,
}

impl OutputDir {
    pub fn prepare(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            if !root.is_dir() {
                return config(format!("output path {} exists and is not a directory", root.display()));
            }
            let occupied = std::fs::read_dir(root)?.next().is_some();
            if occupied && !force {
                return config(format!("output directory {} is not empty; pass --force to overwrite", root.display()));
            }
            if occupied {
                remove_previous(root)?;
            }
        }
        std::fs::create_dir_all(root)?;
        Ok(OutputDir { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.written.push((rel.to_string(), sha256_hex(bytes)));
        Ok(path)
    }

    /// Writes the manifest listing every artifact written so far.
    pub fn finish(self, mut manifest: ExperimentManifest) -> Result<ExperimentManifest> {
        manifest.artifacts = self.written.iter().map(|(p, d)| FileDigest { path: p.clone(), sha256: d.clone() }).collect();
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

fn remove_previous(root: &Path) -> Result<()> {
    let manifest_path = root.join(MANIFEST_FILE);
    let Ok(text) = std::fs::read_to_string(&manifest_path) else { return Ok(()) };
    let Ok(previous) = serde_json::from_str::<ExperimentManifest>(&text) else { return Ok(()) };
    for a in &previous.artifacts {
        let rel = Path::new(&a.path);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            continue;
        }
        let p = root.join(rel);
        if p.is_file() {
            std::fs::remove_file(&p)?;
        }
        let mut dir = p.parent();
        while let Some(d) = dir {
            if d == root || std::fs::remove_dir(d).is_err() {
                break;
            }
            dir = d.parent();
        }
    }
    std::fs::remove_file(manifest_path)?;
    Ok(())
}
