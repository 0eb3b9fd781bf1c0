//! Run provenance. Every output directory carries one manifest; every table
//! in it names the manifest on its first line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::CliError;
use crate::table::MANIFEST_FILE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    /// RFC 3339, UTC. The only field that differs between reruns.
    pub timestamp: String,
    pub seed_roots: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Full effective configuration, defaults included.
    pub config: Config,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, seed_roots: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seed_roots,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// Digests `files` (relative to `out`) and writes the manifest there.
    pub fn finish(mut self, out: &Path, files: &[PathBuf]) -> Result<PathBuf, CliError> {
        for f in files {
            let mut d = FileDigest::of(f)?;
            if let Ok(rel) = f.strip_prefix(out) {
                d.path = rel.display().to_string();
            }
            self.outputs.push(d);
        }
        let path = out.join(MANIFEST_FILE);
        let text = toml::to_string(&self).map_err(|e| CliError::Data(format!("manifest: {e}")))?;
        std::fs::write(&path, text).map_err(CliError::io(&path))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let m: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        m.config.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_with_digests() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("rows.csv");
        std::fs::write(&data, "abc").unwrap();
        let mut cfg = Config::default();
        cfg.sim.grid.n_seeds = 3;
        let m = RunManifest::new("simulate", &cfg, vec![7]);
        let path = m.finish(dir.path(), &[data]).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.seed_roots, vec![7]);
        assert_eq!(back.outputs[0].path, "rows.csv");
        assert_eq!(
            back.outputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
