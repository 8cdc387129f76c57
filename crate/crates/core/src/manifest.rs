//! Run manifests: which command produced which files, from which config and seed.
//!
//! One `manifest.json` per output directory. Each artifact-producing command
//! appends a run; a file rewritten by a later run moves to that run, so every
//! file is listed exactly once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::files::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a config in canonical form (keys sorted, compact).
pub fn config_hash(config: &serde_json::Value) -> String {
    // serde_json maps are sorted unless `preserve_order` is enabled.
    sha256_hex(config.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub command: String,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub config: Option<serde_json::Value>,
    /// Input files with their hashes at the time of the run.
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub warnings: Vec<String>,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub runs: Vec<RunEntry>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn hash_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path)?;
    Ok((sha256_hex(&bytes), bytes.len() as u64))
}

/// Collects one run's outputs, then records them in the directory manifest.
#[derive(Debug)]
pub struct RunRecorder {
    dir: PathBuf,
    entry: RunEntry,
}

impl RunRecorder {
    pub fn new(dir: &Path, command: &str, seed: u64, config: Option<serde_json::Value>) -> Self {
        Self {
            dir: dir.to_path_buf(),
            entry: RunEntry {
                command: command.to_string(),
                seed,
                config_hash: config.as_ref().map(config_hash),
                config,
                inputs: Vec::new(),
                artifacts: Vec::new(),
                warnings: Vec::new(),
                started: unix_now(),
                finished: 0,
                tool_version: TOOL_VERSION.to_string(),
            },
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let (sha256, bytes) = hash_file(path)?;
        self.entry.inputs.push(Artifact {
            path: path.display().to_string(),
            sha256,
            bytes,
        });
        Ok(())
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.entry.warnings.push(message.into());
    }

    /// Atomically writes `name` inside the run directory and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.record(name, bytes);
        Ok(path)
    }

    /// Records a file written by other means.
    pub fn record_file(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.entry.artifacts.retain(|a| a.path != name);
        self.entry.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    /// Appends the run to the directory manifest.
    pub fn finish(mut self) -> Result<RunEntry> {
        self.entry.finished = unix_now();
        let path = self.dir.join(MANIFEST_FILE);
        let mut manifest = if path.exists() {
            RunManifest::load(&path)?
        } else {
            RunManifest::default()
        };
        for run in &mut manifest.runs {
            run.artifacts.retain(|a| !self.entry.artifacts.iter().any(|b| b.path == a.path));
        }
        manifest.runs.push(self.entry.clone());
        write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(self.entry)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Verification {
    pub checked: usize,
    pub problems: Vec<String>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Re-hashes configs and artifacts and checks that every file in the
/// directory is listed by exactly one run.
pub fn verify_dir(dir: &Path) -> Result<Verification> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let mut v = Verification::default();
    let mut owners: BTreeMap<String, usize> = BTreeMap::new();
    for (i, run) in manifest.runs.iter().enumerate() {
        if let (Some(cfg), Some(h)) = (&run.config, &run.config_hash) {
            if &config_hash(cfg) != h {
                v.problems.push(format!("run {i} ({}): config hash mismatch", run.command));
            }
        }
        for a in &run.artifacts {
            *owners.entry(a.path.clone()).or_default() += 1;
            v.checked += 1;
            match hash_file(&dir.join(&a.path)) {
                Ok((h, _)) if h == a.sha256 => {}
                Ok(_) => v.problems.push(format!("{}: content changed since run {i} ({})", a.path, run.command)),
                Err(_) => v.problems.push(format!("{}: missing", a.path)),
            }
        }
    }
    for (path, n) in &owners {
        if *n > 1 {
            v.problems.push(format!("{path}: listed by {n} runs"));
        }
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).map_err(|_| Error::contract("path outside manifest dir"))?;
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel != MANIFEST_FILE && !owners.contains_key(&rel) {
                v.problems.push(format!("{rel}: not listed in the manifest"));
            }
        }
    }
    v.problems.sort();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("mp-manifest-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn runs_extend_and_verify() {
        let d = tmp("extend");
        let cfg = serde_json::json!({"b": 1, "a": [1.5, 2]});
        let mut r = RunRecorder::new(&d, "gen-data", 7, Some(cfg.clone()));
        r.write("data.csv", b"x").unwrap();
        r.write("notes.txt", b"y").unwrap();
        r.finish().unwrap();
        let mut r = RunRecorder::new(&d, "train", 7, None);
        r.write("data.csv", b"z").unwrap();
        r.finish().unwrap();
        let v = verify_dir(&d).unwrap();
        assert!(v.ok(), "{:?}", v.problems);
        let m = RunManifest::load(&d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.runs[0].artifacts.len(), 1);
        assert_eq!(m.runs[0].config_hash.as_deref(), Some(config_hash(&cfg).as_str()));

        std::fs::write(d.join("notes.txt"), b"tampered").unwrap();
        std::fs::write(d.join("stray.txt"), b"").unwrap();
        let v = verify_dir(&d).unwrap();
        assert_eq!(v.problems.len(), 2);
        std::fs::remove_dir_all(&d).unwrap();
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":2}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":2,"x":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
    }
}
