use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation, written as `manifest.json` in its output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    /// Paths relative to the output directory.
    pub outputs: Vec<Artifact>,
    pub status: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn start(command: &str, config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: "running".into(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(Artifact {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Hashes every listed output (relative to `dir`), then writes the manifest.
    pub fn finish(mut self, dir: &Path, outputs: &[&str], status: &str) -> Result<()> {
        for rel in outputs {
            let sha256 = sha256_file(&dir.join(rel))?;
            self.outputs.push(Artifact {
                path: PathBuf::from(rel),
                sha256,
            });
        }
        self.status = status.to_string();
        self.finished_unix_ms = now_ms();
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)
            .with_context(|| format!("writing manifest in {}", dir.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_hashed_outputs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "abc").unwrap();
        let m = RunManifest::start("test", serde_json::json!({"k": 1}), Some(3)).unwrap();
        m.finish(dir.path(), &["a.txt"], "ok").unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["outputs"][0]["path"], "a.txt");
        assert_eq!(v["outputs"][0]["sha256"], sha256_hex(b"abc"));
        assert_eq!(v["status"], "ok");
    }
}
