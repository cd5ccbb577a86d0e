//! File-backed evaluation runs. Each run is a directory named by a digest
//! of its configuration and cases, written once and never modified.
//!
//! ```text
//! <root>/<run_id>/run.json
//! <root>/<run_id>/report.json
//! <root>/<run_id>/report.txt
//! <root>/<run_id>/cases.json
//! <root>/.lock
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{Aggregate, EvalReport, GroundingCase, Rodeo};

/// Overrides the creation time recorded in `run.json` (seconds since epoch).
pub const ENV_SOURCE_DATE_EPOCH: &str = "SOURCE_DATE_EPOCH";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid run id {0:?}")]
    InvalidId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub config_digest: String,
    pub config: Value,
    pub cases: usize,
    pub aggregate: Aggregate,
    pub rodeo: Rodeo,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn creation_time() -> DateTime<Utc> {
    std::env::var(ENV_SOURCE_DATE_EPOCH)
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::from_timestamp(secs, 0))
        .unwrap_or_else(Utc::now)
}

pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
        move |source| RunError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunError> {
        let text = fs::read_to_string(path).map_err(Self::io(path))?;
        serde_json::from_str(&text).map_err(|source| RunError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf, RunError> {
        if !valid_run_id(run_id) {
            return Err(RunError::InvalidId(run_id.to_string()));
        }
        Ok(self.root.join(run_id))
    }

    /// Writes a run unless one with the same id exists, in which case the
    /// stored record is returned untouched.
    pub fn write(&self, config: &Value, report: &EvalReport, cases: &[GroundingCase]) -> Result<RunRecord, RunError> {
        let config_text = serde_json::to_string(config).expect("config serializes");
        let cases_text = serde_json::to_string_pretty(cases).expect("cases serialize");
        let config_digest = hex_digest(config_text.as_bytes());
        let run_id = hex_digest(format!("{config_digest}\n{}", hex_digest(cases_text.as_bytes())).as_bytes())[..16].to_string();
        let dir = self.run_dir(&run_id)?;
        fs::create_dir_all(&self.root).map_err(Self::io(&self.root))?;
        // one writer per store; the lock is released when the file closes
        let lock_path = self.root.join(".lock");
        let lock = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(Self::io(&lock_path))?;
        lock.lock().map_err(Self::io(&lock_path))?;
        let record_path = dir.join("run.json");
        if record_path.exists() {
            return Self::read_json(&record_path);
        }

        let record = RunRecord {
            run_id: run_id.clone(),
            created_at: creation_time(),
            config_digest,
            config: config.clone(),
            cases: cases.len(),
            aggregate: report.aggregate.clone(),
            rodeo: report.rodeo,
        };
        // stage in a sibling directory so a crash never leaves a partial run
        let staging = self.root.join(format!(".{run_id}.partial"));
        let _ = fs::remove_dir_all(&staging);
        fs::create_dir_all(&staging).map_err(Self::io(&staging))?;
        let files = [
            ("report.json", serde_json::to_string_pretty(report).expect("report serializes") + "\n"),
            ("report.txt", report.to_text()),
            ("cases.json", cases_text + "\n"),
            ("run.json", serde_json::to_string_pretty(&record).expect("record serializes") + "\n"),
        ];
        for (name, body) in files {
            let path = staging.join(name);
            fs::write(&path, body).map_err(Self::io(&path))?;
        }
        fs::rename(&staging, &dir).map_err(Self::io(&dir))?;
        Ok(record)
    }

    /// Runs sorted by creation time, then id.
    pub fn list(&self) -> Result<Vec<RunRecord>, RunError> {
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Self::io(&self.root)(e)),
        };
        let mut runs = Vec::new();
        for entry in entries {
            let entry = entry.map_err(Self::io(&self.root))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let record = entry.path().join("run.json");
            if valid_run_id(&name) && record.is_file() {
                runs.push(Self::read_json::<RunRecord>(&record)?);
            }
        }
        runs.sort_by(|a, b| (a.created_at, &a.run_id).cmp(&(b.created_at, &b.run_id)));
        Ok(runs)
    }

    pub fn get(&self, run_id: &str) -> Result<Option<RunRecord>, RunError> {
        let path = self.run_dir(run_id)?.join("run.json");
        if !path.is_file() {
            return Ok(None);
        }
        Self::read_json(&path).map(Some)
    }

    pub fn report(&self, run_id: &str) -> Result<EvalReport, RunError> {
        Self::read_json(&self.run_dir(run_id)?.join("report.json"))
    }

    pub fn cases(&self, run_id: &str) -> Result<Vec<GroundingCase>, RunError> {
        Self::read_json(&self.run_dir(run_id)?.join("cases.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::metrics::{build_report, EvalConfig, GroupBy};

    #[test]
    fn write_is_content_addressed_and_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path());
        let cases = vec![GroundingCase {
            image_id: "i".into(),
            class_name: "a".into(),
            dims: None,
            gt: vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()],
            preds: vec![],
        }];
        let report = build_report(&cases, GroupBy::Class, None, &EvalConfig::default()).unwrap();
        let config = serde_json::json!({"split": "test"});
        let first = store.write(&config, &report, &cases).unwrap();
        let second = store.write(&config, &report, &cases).unwrap();
        assert_eq!(first, second);
        assert_eq!(store.list().unwrap(), vec![first.clone()]);
        assert_eq!(store.cases(&first.run_id).unwrap(), cases);
        let other = store.write(&serde_json::json!({"split": "train"}), &report, &cases).unwrap();
        assert_ne!(other.run_id, first.run_id);
        assert!(store.get("../etc").is_err());
        assert_eq!(store.get("abcdef").unwrap(), None);
    }
}
