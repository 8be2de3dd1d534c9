use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::{Error, Result};

/// Record of one command: the resolved configuration and every file it
/// wrote, relative to `config.out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            config: config.clone(),
            seed: config.seed,
            artifacts: Vec::new(),
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.config.out_dir)
    }

    /// Registers `path` (inside the output directory) as an artifact.
    pub fn add(&mut self, path: &Path) {
        let rel = path.strip_prefix(self.out_dir()).unwrap_or(path);
        self.artifacts.push(rel.to_string_lossy().replace('\\', "/"));
    }

    pub fn artifact_paths(&self) -> Vec<PathBuf> {
        self.artifacts.iter().map(|a| self.out_dir().join(a)).collect()
    }

    /// Writes the manifest into the output directory and returns its path.
    pub fn save(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(Self::file_name(&self.command));
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Reads a run configuration from a `key = value` file or a manifest.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.config.validate()?;
        Ok(m.config)
    } else {
        RunConfig::parse_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().display().to_string();
        let mut m = RunManifest::new("train", None, &cfg);
        m.add(&dir.path().join("model.afck"));
        assert_eq!(m.artifacts, ["model.afck"]);
        let p = m.save().unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), m);
        assert_eq!(read_config(&p).unwrap(), cfg);
    }
}
