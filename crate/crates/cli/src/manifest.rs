//! Run manifests: enough to replay a command and to detect changed inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Command arguments after config resolution; replaying them reproduces the run.
    pub args: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_config: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, InputRecord>,
}

impl Manifest {
    pub fn new(command: &str, args: &impl Serialize) -> Result<Self> {
        Ok(Manifest {
            tool: "geos".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: serde_json::to_value(args)?,
            resolved_config: None,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
        })
    }

    /// Record a file or directory input by content hash.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let sha256 = hash_path(path)?;
        self.inputs.insert(
            name.into(),
            InputRecord {
                path: path.to_path_buf(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Arguments of a replayable command, after checking its inputs are unchanged.
    pub fn replay_args<A: serde::de::DeserializeOwned>(&self, command: &str) -> Result<A> {
        if self.command != command {
            bail!("manifest records `{}`, not `{command}`", self.command);
        }
        for (name, rec) in &self.inputs {
            let now = hash_path(&rec.path).with_context(|| format!("input `{name}`"))?;
            if now != rec.sha256 {
                bail!("input `{name}` at {} changed since the manifest was written", rec.path.display());
            }
        }
        Ok(serde_json::from_value(self.args.clone())?)
    }
}

/// SHA-256 of a file, or of a directory's sorted `relative-path digest` listing.
/// Manifests inside the tree are skipped.
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).with_context(|| format!("{} is not reachable", path.display()))?;
    if meta.is_file() {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(geos_core::sha256_hex(&bytes));
    }
    let mut files = Vec::new();
    collect(path, path, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for rel in files {
        let bytes = fs::read(path.join(&rel))?;
        listing.push_str(&format!("{} {}\n", geos_core::sha256_hex(&bytes), rel));
    }
    Ok(geos_core::sha256_hex(listing.as_bytes()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != FILE_NAME) {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
