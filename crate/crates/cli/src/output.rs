use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

/// Output directory; created on first use.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|source| CliError::Output {
            path: root.to_owned(),
            source,
        })?;
        Ok(OutDir { root: root.to_owned() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(name, text)
    }
}

/// Written next to every command's outputs. Two runs with equal manifests
/// produce equal outputs.
#[derive(Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 over the input files read, in a fixed order.
    pub inputs_hash: String,
    pub config: &'a RunConfig,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig, inputs: &[PathBuf]) -> Result<Self, CliError> {
        Ok(Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config_hash: config.hash(),
            inputs_hash: hash_files(inputs)?,
            config,
        })
    }
}

fn hash_files(paths: &[PathBuf]) -> Result<String, CliError> {
    let mut hasher = Sha256::new();
    for p in paths {
        let Ok(bytes) = fs::read(p) else { continue };
        if let Some(name) = p.file_name() {
            hasher.update(name.to_string_lossy().as_bytes());
        }
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}
