//! Output tree layout, provenance stamps and run manifests.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde::Serialize;
use serde_json::{json, Value};

use crate::failure::{Failure, Outcome};

pub const DEFAULT_ROOT: &str = "netsched-out";

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn report(&self, id: &str) -> PathBuf {
        self.root.join("reports").join(id)
    }
}

/// Resolved settings and seed of a run; stamped into every file it writes.
pub fn provenance(command: &str, seed: u64, config: &impl Serialize) -> Value {
    json!({
        "tool": "netsched",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config": serde_json::to_value(config).expect("config serializes"),
    })
}

/// Comment line for CSV and trace files.
pub fn provenance_line(p: &Value) -> String {
    format!("# provenance {p}\n")
}

/// Keeps ids usable as directory names.
pub fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn write(path: &Path, bytes: &[u8]) -> Outcome<()> {
    netsched_core::write_atomic(path, bytes)
        .map_err(|e| Failure::File(anyhow!("writing {}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

/// CSV body produced by `fill`, prefixed with the provenance line.
pub fn csv_bytes(p: &Value, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut out = provenance_line(p).into_bytes();
    fill(&mut out).expect("writing to memory");
    out
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: usize,
}

/// Collects the files of one run and writes `manifest.json` listing them.
#[derive(Debug)]
pub struct Manifest {
    dir: PathBuf,
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(dir: PathBuf, root: &Path) -> Manifest {
        Manifest {
            dir,
            root: root.to_path_buf(),
            entries: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `bytes` to `path` and records it, relative to the output root.
    pub fn add(&mut self, path: &Path, bytes: &[u8]) -> Outcome<()> {
        write(path, bytes)?;
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.entries.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len(),
        });
        Ok(())
    }

    /// Writes a file inside the run directory.
    pub fn add_local(&mut self, name: &str, bytes: &[u8]) -> Outcome<()> {
        let path = self.dir.join(name);
        self.add(&path, bytes)
    }

    pub fn finish(self, id: &str, provenance: &Value) -> Outcome<PathBuf> {
        let path = self.dir.join("manifest.json");
        let doc = json!({
            "id": id,
            "provenance": provenance,
            "files": self.entries,
        });
        write(&path, &json_bytes(&doc))?;
        Ok(path)
    }
}
