//! Output bookkeeping: rollback of partial outputs and `provenance.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::store::{blob_path, manifest_path};

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Tracks everything a command writes. Unless [`Outputs::commit`] is
/// called, dropping it deletes the tracked files and any directory it
/// created.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `dir` and its missing ancestors; the outermost one created
    /// here is removed on rollback.
    pub fn dir(&mut self, dir: &Path) -> anyhow::Result<()> {
        let mut first_missing = None;
        for a in dir.ancestors().filter(|a| !a.as_os_str().is_empty()) {
            if a.exists() {
                break;
            }
            first_missing = Some(a.to_path_buf());
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        self.dirs.extend(first_missing);
        Ok(())
    }

    /// Registers a file about to be written.
    pub fn file(&mut self, path: impl Into<PathBuf>) -> PathBuf {
        let path = path.into();
        self.files.push(path.clone());
        path
    }

    /// Registers both halves of an archive about to be written.
    pub fn archive(&mut self, prefix: &Path) -> PathBuf {
        self.files.push(manifest_path(prefix));
        self.files.push(blob_path(prefix));
        prefix.to_path_buf()
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

/// What produced the files of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub command: String,
    pub tool: String,
    pub version: String,
    pub config_hash: Option<String>,
    pub config: Option<ExperimentConfig>,
    pub seeds: BTreeMap<String, u64>,
    pub params: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl ProvenanceEntry {
    pub fn new(command: &str, config: Option<&ExperimentConfig>) -> Self {
        Self {
            command: command.to_string(),
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.map(ExperimentConfig::hash),
            config: config.cloned(),
            seeds: BTreeMap::new(),
            params: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn param(mut self, name: &str, value: impl ToString) -> Self {
        self.params.insert(name.to_string(), value.to_string());
        self
    }

    /// Lists `files` relative to `dir`.
    pub fn outputs(mut self, dir: &Path, files: &[PathBuf]) -> Self {
        self.outputs = files
            .iter()
            .map(|f| {
                f.strip_prefix(dir)
                    .unwrap_or(f)
                    .to_string_lossy()
                    .replace('\\', "/")
            })
            .collect();
        self.outputs.sort();
        self
    }
}

/// Adds or replaces the entry `key` in `dir/provenance.json`, keeping
/// entries written by other commands into the same directory.
pub fn record_provenance(dir: &Path, key: &str, entry: ProvenanceEntry) -> anyhow::Result<PathBuf> {
    let path = dir.join(PROVENANCE_FILE);
    let mut all: BTreeMap<String, ProvenanceEntry> = if path.exists() {
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        BTreeMap::new()
    };
    all.insert(key.to_string(), entry);
    let mut text = serde_json::to_string_pretty(&all)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let tmp = tempfile::tempdir().unwrap();
        let nested = tmp.path().join("a/b");
        {
            let mut out = Outputs::new();
            out.dir(&nested).unwrap();
            let f = out.file(nested.join("x.txt"));
            fs::write(&f, "x").unwrap();
        }
        assert!(!tmp.path().join("a").exists());

        let mut out = Outputs::new();
        out.dir(&nested).unwrap();
        fs::write(out.file(nested.join("x.txt")), "x").unwrap();
        out.commit();
        assert!(nested.join("x.txt").exists());
    }

    #[test]
    fn provenance_entries_merge_by_key() {
        let tmp = tempfile::tempdir().unwrap();
        record_provenance(
            tmp.path(),
            "one",
            ProvenanceEntry::new("gen-model", None).seed("model", 3),
        )
        .unwrap();
        record_provenance(tmp.path(), "two", ProvenanceEntry::new("gen-calib", None)).unwrap();
        record_provenance(
            tmp.path(),
            "one",
            ProvenanceEntry::new("gen-model", None).seed("model", 4),
        )
        .unwrap();
        let text = fs::read_to_string(tmp.path().join(PROVENANCE_FILE)).unwrap();
        let all: BTreeMap<String, ProvenanceEntry> = serde_json::from_str(&text).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all["one"].seeds["model"], 4);
    }
}
