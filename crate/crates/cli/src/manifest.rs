use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Stage};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::input(Stage::Artifacts, format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Run record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub library_version: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_secs: f64,
    /// Effective configuration after overrides.
    pub config: serde_json::Value,
    /// Hash of the configuration fields that determine the artifacts.
    pub fingerprint: String,
    pub input_sha256: Option<String>,
    /// Artifact file name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::input(Stage::Artifacts, format!("cannot read {}: {e}; run `aggtree fit` first", path.display()))
        })?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::input(Stage::Artifacts, format!("malformed manifest {}: {e}", path.display())))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CliError::input(
                Stage::Artifacts,
                format!("unsupported manifest schema_version {}", m.schema_version),
            ));
        }
        Ok(m)
    }

    /// Checks that every recorded artifact in `dir` still has its recorded hash.
    pub fn verify_artifacts(&self, dir: &Path) -> Result<(), CliError> {
        for (name, expected) in &self.artifacts {
            if hash_file(&dir.join(name))? != *expected {
                return Err(CliError::input(
                    Stage::Artifacts,
                    format!("artifact {name} was modified after `{}`; rerun it", self.command),
                ));
            }
        }
        Ok(())
    }
}

/// Writes files into an output directory and records their hashes.
pub struct ArtifactWriter {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::internal(Stage::Output, format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hashes: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::internal(Stage::Output, format!("cannot write {}: {e}", path.display())))?;
        self.hashes.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(path)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn names(&self) -> Vec<String> {
        self.hashes.keys().cloned().collect()
    }

    pub fn finish(self, name: &str, mut manifest: Manifest) -> Result<PathBuf, CliError> {
        manifest.artifacts = self.hashes;
        let path = self.dir.join(name);
        std::fs::write(&path, manifest.to_json())
            .map_err(|e| CliError::internal(Stage::Output, format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Wraps a JSON document with a `schema_version` field.
pub fn versioned(kind: &str, body: serde_json::Value) -> String {
    let doc = serde_json::json!({
        "schema_version": 1,
        "kind": kind,
        "data": body,
    });
    serde_json::to_string_pretty(&doc).expect("json serializes") + "\n"
}
