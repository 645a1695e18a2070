//! `manifest.json`: what a command was asked to do and what it produced.
//!
//! Written when a command starts (status `running`) and rewritten when it
//! ends, so an interrupted run still leaves a record behind.

use std::path::{Path, PathBuf};

use dehaze::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: Option<String>,
    pub status: Status,
    pub error: Option<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<Artifact>,
    #[serde(skip)]
    dir: PathBuf,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", hasher.finalize()))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl RunManifest {
    /// Creates `dir` and writes the initial manifest.
    pub fn start(
        dir: &Path,
        command: &str,
        seed: Option<u64>,
        config: impl Serialize,
        inputs: Vec<PathBuf>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            started: now(),
            finished: None,
            status: Status::Running,
            error: None,
            config: serde_json::to_value(config)?,
            inputs,
            outputs: Vec::new(),
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        write_atomic(&self.dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }

    /// Records an output file with its digest.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn finish(mut self, outcome: &std::result::Result<(), String>) -> Result<()> {
        self.finished = Some(now());
        match outcome {
            Ok(()) => self.status = Status::Succeeded,
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(e.clone());
            }
        }
        self.write()
    }
}
