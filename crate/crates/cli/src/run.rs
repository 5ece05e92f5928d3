//! Run directories and their manifests.
//!
//! Layout of a run directory:
//!
//! | file            | content                                   |
//! |-----------------|-------------------------------------------|
//! | `manifest.json` | [`Manifest`]                              |
//! | `config.json`   | the resolved configuration                |
//! | `checkpoint.json` | final model (flow checkpoint format)    |
//! | `history.csv`   | training or annealing history             |
//! | `metrics.json`  | evaluation report                         |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetEvals {
    /// Evaluations spent producing training signal (labels, buffers, IS).
    pub training: u64,
    /// Evaluations spent by the final evaluation.
    pub evaluation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub name: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub build: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub error: Option<String>,
    pub target_evals: TargetEvals,
    /// Artifact name → path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("{} {} ({profile})", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn hash_config(resolved_json: &str) -> String {
    hex::encode(Sha256::digest(resolved_json.as_bytes()))
}

pub struct RunDir {
    pub path: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    /// Creates the directory and writes the resolved config and an initial
    /// `running` manifest.
    pub fn create<C: Serialize>(
        path: &Path,
        command: &str,
        name: Option<String>,
        seed: u64,
        config: &C,
    ) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let resolved = serde_json::to_string_pretty(config).map_err(|e| CliError::failure(e.to_string()))?;
        let mut run = Self {
            path: path.to_path_buf(),
            manifest: Manifest {
                command: command.into(),
                name,
                config_hash: hash_config(&resolved),
                seed,
                build: build_id(),
                started_at: now(),
                finished_at: None,
                status: "running".into(),
                error: None,
                target_evals: TargetEvals::default(),
                artifacts: BTreeMap::new(),
            },
        };
        run.write_text("config", "config.json", &resolved)?;
        run.save_manifest()?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&mut self, artifact: &str, file: &str, text: &str) -> Result<(), CliError> {
        let p = self.file(file);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        self.manifest.artifacts.insert(artifact.into(), file.into());
        Ok(())
    }

    pub fn write_json<V: Serialize>(&mut self, artifact: &str, file: &str, value: &V) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::failure(e.to_string()))?;
        self.write_text(artifact, file, &text)
    }

    pub fn save_manifest(&self) -> Result<(), CliError> {
        let p = self.file("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::failure(e.to_string()))?;
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    /// Records the outcome; artifacts written so far are kept on failure.
    pub fn finish(mut self, outcome: &Result<(), CliError>) -> Result<(), CliError> {
        self.manifest.finished_at = Some(now());
        match outcome {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(e.message.clone());
            }
        }
        self.save_manifest()
    }
}
