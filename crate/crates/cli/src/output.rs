//! Output directory bookkeeping and the reproducibility manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use vtpalm::kv::KeyValues;

pub const MANIFEST: &str = "manifest.txt";

pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Path for `name` inside the directory, recorded for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Writes `manifest.txt`: command, seed, input hashes, then output hashes.
    pub fn finish(mut self, command: &str, seed: u64, inputs: &[(&str, &Path)]) -> Result<PathBuf> {
        let mut kv = KeyValues::new();
        kv.set("command", command);
        kv.set("seed", seed);
        for (label, path) in inputs {
            kv.set(&format!("input.{label}"), sha256_file(path)?);
        }
        self.files.sort();
        for name in &self.files {
            kv.set(
                &format!("output.{name}"),
                sha256_file(&self.root.join(name))?,
            );
        }
        let path = self.root.join(MANIFEST);
        kv.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Relative paths that do not exist are looked up under `VTPALM_DATA_DIR`.
pub fn resolve_input(path: &Path, data_dir: Option<&Path>) -> PathBuf {
    match data_dir {
        Some(root) if path.is_relative() && !path.exists() => root.join(path),
        _ => path.to_path_buf(),
    }
}
