use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cdiff::{Error, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Record of one command run: its resolved config and the hashes of what
/// it read and wrote. Holds no timestamps, so reruns reproduce it exactly.
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, config: &BTreeMap<String, String>) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    /// Writes `<out>/<command>.manifest.json` and returns its path.
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let hashes = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> { paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect() };
        let doc = json!({
            "command": self.command,
            "config": self.config,
            "inputs": hashes(&self.inputs)?,
            "outputs": hashes(&self.outputs)?,
        });
        fs::create_dir_all(out)?;
        let path = out.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
