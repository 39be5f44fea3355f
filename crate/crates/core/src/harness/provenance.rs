use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::write_json;

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

/// Contents of `run.json`: what was run, with which configuration and
/// seeds, by which build, and how it ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub versions: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("patchfcn".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("target_arch".to_string(), std::env::consts::ARCH.to_string()),
        ("target_os".to_string(), std::env::consts::OS.to_string()),
    ])
}

/// A run directory with its provenance record, written on creation and
/// rewritten when the run finishes.
#[derive(Debug)]
pub struct RunDir {
    pub dir: PathBuf,
    pub record: RunRecord,
}

impl RunDir {
    pub fn create(
        dir: &Path,
        command: &str,
        args: Vec<String>,
        config: serde_json::Value,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let record = RunRecord {
            command: command.into(),
            args,
            config,
            seeds,
            versions: versions(),
            started_unix: now(),
            finished_unix: None,
            status: RunStatus::Running,
            error: None,
        };
        let run = Self {
            dir: dir.to_path_buf(),
            record,
        };
        run.write()?;
        Ok(run)
    }

    fn write(&self) -> Result<()> {
        write_json(&self.dir.join(RUN_FILE), &self.record)
    }

    pub fn finish<T>(mut self, outcome: &std::result::Result<T, String>) -> Result<()> {
        self.record.finished_unix = Some(now());
        match outcome {
            Ok(_) => self.record.status = RunStatus::Ok,
            Err(e) => {
                self.record.status = RunStatus::Failed;
                self.record.error = Some(e.clone());
            }
        }
        self.write()
    }
}

pub fn load_run_record(dir: &Path) -> Result<RunRecord> {
    crate::stack::read_json(&dir.join(RUN_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_lifecycle() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::create(
            tmp.path(),
            "train",
            vec!["--seed".into(), "3".into()],
            serde_json::json!({"a": 1}),
            vec![3],
        )
        .unwrap();
        assert_eq!(load_run_record(tmp.path()).unwrap().status, RunStatus::Running);
        run.finish::<()>(&Err("boom".into())).unwrap();
        let rec = load_run_record(tmp.path()).unwrap();
        assert_eq!(rec.status, RunStatus::Failed);
        assert_eq!(rec.error.as_deref(), Some("boom"));
        assert_eq!(rec.seeds, vec![3]);
        assert!(rec.versions.contains_key("patchfcn"));
    }
}
