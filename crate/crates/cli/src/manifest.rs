use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct BackendIds {
    pub grounding: String,
    pub correction: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: Value,
    pub backends: BackendIds,
    pub inputs: Vec<InputDigest>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub exit_code: Option<i32>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value, backends: BackendIds) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().collect(),
            seed,
            config,
            backends,
            inputs: Vec::new(),
            started_at: now(),
            finished_at: None,
            exit_code: None,
        }
    }

    pub fn input(mut self, role: &str, path: &Path) -> anyhow::Result<Self> {
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: file_digest(path)?,
        });
        Ok(self)
    }
}

/// A manifest that lives on disk for the duration of a run.
pub struct ManifestFile {
    path: PathBuf,
    manifest: RunManifest,
}

impl ManifestFile {
    pub fn create(dir: &Path, manifest: RunManifest) -> anyhow::Result<Self> {
        let m = Self {
            path: dir.join("manifest.json"),
            manifest,
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> anyhow::Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(&self.path, bytes).with_context(|| format!("cannot write {}", self.path.display()))
    }

    pub fn finish(mut self, exit_code: i32) -> anyhow::Result<()> {
        self.manifest.finished_at = Some(now());
        self.manifest.exit_code = Some(exit_code);
        self.write()
    }
}

/// `dir` if given, else `./runs/<UTC timestamp>` with a numeric suffix when
/// that already exists.
pub fn run_dir(dir: Option<&Path>) -> anyhow::Result<PathBuf> {
    let path = match dir {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S").to_string();
            let base = PathBuf::from("runs").join(&stamp);
            let mut candidate = base.clone();
            let mut n = 1;
            while candidate.exists() {
                candidate = PathBuf::from("runs").join(format!("{stamp}-{n}"));
                n += 1;
            }
            candidate
        }
    };
    std::fs::create_dir_all(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_written_then_finished() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.json");
        std::fs::write(&data, b"[]").unwrap();
        let m = RunManifest::new(
            "bench",
            3,
            Value::Null,
            BackendIds {
                grounding: "sim".into(),
                correction: None,
            },
        )
        .input("dataset", &data)
        .unwrap();
        let f = ManifestFile::create(dir.path(), m).unwrap();
        let early: Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert!(early["finished_at"].is_null());
        assert_eq!(early["inputs"][0]["sha256"], sha256_hex(b"[]"));
        f.finish(0).unwrap();
        let late: Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(late["exit_code"], 0);
        assert!(late["finished_at"].is_string());
    }
}
