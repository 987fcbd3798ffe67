//! Output directories are staged next to their destination and renamed into
//! place only once every file, including the manifest, has been written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use flowdas_core::config::ExperimentConfig;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

pub struct OutputDir {
    target: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl OutputDir {
    /// Fails if `target` exists and `force` is unset.
    pub fn create(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            return Err(CliError::Config(format!(
                "output {} already exists; pass --force to replace it",
                target.display()
            )));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Config(format!("invalid output path {}", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
        let staging = parent.join(format!(".{}.partial", name.to_string_lossy()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| CliError::io(&staging, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    /// Writes `manifest.json` and moves the directory into place.
    pub fn commit(mut self, manifest: Manifest) -> Result<()> {
        let manifest = Manifest {
            files: hash_tree(&self.staging)?,
            ..manifest
        };
        let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        json.push('\n');
        let path = self.file(MANIFEST);
        fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
        if self.target.is_dir() {
            fs::remove_dir_all(&self.target).map_err(|e| CliError::io(&self.target, e))?;
        } else if self.target.exists() {
            fs::remove_file(&self.target).map_err(|e| CliError::io(&self.target, e))?;
        }
        fs::rename(&self.staging, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Run record. Holds nothing that varies between identical runs (no
/// timestamps, absolute paths or thread counts), so it is byte-stable too.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Input file name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub details: serde_json::Value,
    /// Output file (relative path) to SHA-256.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            tool: "flowdas".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            details: serde_json::Value::Null,
            files: BTreeMap::new(),
        }
    }

    /// Records an input file under `label`.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
            let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

/// Reads a manifest back as untyped JSON.
pub fn read_manifest(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
