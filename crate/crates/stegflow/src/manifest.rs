//! Run manifests: every CLI command writes one next to its outputs so a run
//! can be reproduced from the manifest alone.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub resolved_config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_string(),
            config_path: None,
            seed,
            checkpoint: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            resolved_config: serde_json::Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "manifest schema {} (expected {MANIFEST_SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Manifest path for a given output file: `<output>.manifest.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        name.push_str(".manifest.json");
        output.with_file_name(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("encode", 7);
        m.outputs.push(PathBuf::from("stego.png"));
        let path = dir.path().join("m.json");
        m.write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back.command, "encode");
        assert_eq!(back.seed, 7);

        let mut bad = m.clone();
        bad.schema_version = 99;
        bad.write(&path).unwrap();
        assert!(RunManifest::read(&path).is_err());
    }

    #[test]
    fn manifest_path_sits_next_to_output() {
        let p = RunManifest::path_for(Path::new("/x/y/stego.png"));
        assert_eq!(p, PathBuf::from("/x/y/stego.png.manifest.json"));
    }
}
