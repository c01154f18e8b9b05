//! JSON-lines dataset manifests.
//!
//! Each line is an object `{"id", "image_path", "mask_path", "caption",
//! "cond"?}`. Relative paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ddim::ConditioningRef;

use super::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    #[serde(default)]
    pub caption: String,
    /// Backend conditioning token; `0` when absent.
    #[serde(default)]
    pub cond: u64,
}

impl ManifestEntry {
    pub fn conditioning(&self) -> ConditioningRef {
        ConditioningRef(self.cond)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }
}

/// A manifest line that was skipped at ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub rejects: Vec<RejectedLine>,
}

/// Parses and validates a manifest. Malformed lines and lines whose files
/// do not exist are collected as rejects; duplicate ids and an empty result
/// are fatal.
pub fn ingest(manifest_path: impl AsRef<Path>) -> Result<Ingested> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, root)
}

pub fn parse_manifest(text: &str, root: PathBuf) -> Result<Ingested> {
    let mut manifest = DatasetManifest { root, entries: Vec::new() };
    let mut rejects = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => {
                rejects.push(RejectedLine { line: line_no, reason: format!("malformed entry: {e}") });
                continue;
            }
        };
        if entry.id.is_empty() {
            rejects.push(RejectedLine { line: line_no, reason: "empty id".into() });
            continue;
        }
        let missing: Vec<String> = [&entry.image_path, &entry.mask_path]
            .into_iter()
            .filter(|p| !manifest.resolve(p).is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            rejects.push(RejectedLine { line: line_no, reason: format!("missing file(s): {}", missing.join(", ")) });
            continue;
        }
        if !seen.insert(entry.id.clone()) {
            return Err(PipelineError::DuplicateId(entry.id));
        }
        manifest.entries.push(entry);
    }
    if manifest.entries.is_empty() {
        return Err(PipelineError::EmptyManifest { rejected: rejects.len() });
    }
    Ok(Ingested { manifest, rejects })
}

/// Writes values as JSON lines.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(PipelineError::from))
        .collect()
}
