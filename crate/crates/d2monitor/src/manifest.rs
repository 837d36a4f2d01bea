//! Reproducibility manifests: every artifact-producing command records its
//! resolved configuration, seeds, input/output hashes, and wall-clock
//! timings in a JSON file next to the artifact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved configuration, flags included.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.inputs.push(artifact_ref(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.push(artifact_ref(path)?);
        Ok(())
    }

    pub fn record_ms(&mut self, name: &str, since: Instant) {
        let ms = since.elapsed().as_secs_f64() * 1e3;
        self.timings_ms.insert(name.to_string(), ms.max(0.0));
    }

    /// Write `<artifact>.manifest.json` next to the given artifact path and
    /// return the manifest path.
    pub fn write_alongside(&self, artifact: impl AsRef<Path>) -> Result<PathBuf> {
        let artifact = artifact.as_ref();
        let name = match artifact.file_name() {
            Some(n) => format!("{}.manifest.json", n.to_string_lossy()),
            None => "manifest.json".to_string(),
        };
        let path = artifact.with_file_name(name);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }

    /// Write `manifest.json` inside a directory artifact (bundle dirs).
    pub fn write_into_dir(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

fn artifact_ref(path: impl AsRef<Path>) -> Result<ArtifactRef> {
    let path = path.as_ref();
    Ok(ArtifactRef {
        path: path.to_string_lossy().into_owned(),
        sha256: sha256_file(path)?,
    })
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_written_next_to_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("out.bin");
        std::fs::write(&artifact, b"payload").unwrap();
        let mut m = RunManifest::new("demo", serde_json::json!({"n": 3}), vec![7]);
        m.add_output(&artifact).unwrap();
        let t = Instant::now();
        m.record_ms("total", t);
        let path = m.write_alongside(&artifact).unwrap();
        assert_eq!(path.file_name().unwrap(), "out.bin.manifest.json");
        let back: RunManifest =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(back.command, "demo");
        assert_eq!(back.outputs.len(), 1);
        assert_eq!(back.outputs[0].sha256, sha256_file(&artifact).unwrap());
        assert!(back.timings_ms["total"] >= 0.0);
    }
}
