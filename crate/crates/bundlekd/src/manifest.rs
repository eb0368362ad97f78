//! Run manifests: config snapshot, content hashes, stage timings and cache use.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::io::{file_hash, read_json, write_json, IoError};
use crate::pipeline::{Failure, RunError};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Stages that must never see the test split.
pub const TRAIN_ONLY_STAGES: [&str; 6] = ["teacher_eval", "sample", "mine", "distill", "index", "export_sft"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub millis: u64,
    /// Content hashes of every session the stage read.
    #[serde(default)]
    pub session_hashes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, serde_json::Value>,
}

impl StageRecord {
    /// Stage family, e.g. `distill` for `distill_rule:food`.
    pub fn family(&self) -> &str {
        let head = self.name.split(':').next().unwrap_or("");
        head.split('_').next().filter(|f| *f == "distill").unwrap_or(head)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub kind: String,
    pub id: String,
    pub status: RunStatus,
    pub config: serde_json::Value,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub cache: BTreeMap<String, CacheStats>,
    pub failures: Vec<Failure>,
    /// Hashes of the held-out sessions, kept for the leakage audit.
    #[serde(default)]
    pub test_session_hashes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(kind: &str, id: &str, config: serde_json::Value) -> Self {
        RunManifest {
            schema_version: 1,
            kind: kind.into(),
            id: id.into(),
            status: RunStatus::Running,
            config,
            started_at: now(),
            finished_at: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stages: Vec::new(),
            cache: BTreeMap::new(),
            failures: Vec::new(),
            test_session_hashes: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self, IoError> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn write(&self, dir: &Path) -> Result<(), IoError> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Writes to an explicit path, for verbs whose output is a single file.
    pub fn write_to(&self, path: &Path) -> Result<(), IoError> {
        write_json(path, self)
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<(), IoError> {
        self.inputs.insert(name.into(), file_hash(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, name: &str, path: &Path) -> Result<(), IoError> {
        self.outputs.insert(name.into(), file_hash(path)?);
        Ok(())
    }

    pub fn skip(&mut self, name: &str, reason: &str) {
        let mut detail = BTreeMap::new();
        detail.insert("reason".into(), serde_json::Value::from(reason));
        self.stages.push(StageRecord { name: name.into(), status: StageStatus::Skipped, millis: 0, session_hashes: Vec::new(), detail });
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Train-only stages that hashed a held-out session, with the overlap size.
    pub fn leaks(&self) -> Vec<(String, usize)> {
        let test: BTreeSet<&str> = self.test_session_hashes.iter().map(String::as_str).collect();
        self.stages
            .iter()
            .filter(|s| TRAIN_ONLY_STAGES.contains(&s.family()))
            .filter_map(|s| {
                let n = s.session_hashes.iter().filter(|h| test.contains(h.as_str())).count();
                (n > 0).then(|| (s.name.clone(), n))
            })
            .collect()
    }

    pub fn check_leakage(&self) -> Result<(), RunError> {
        match self.leaks().into_iter().next() {
            Some((stage, count)) => Err(RunError::Leakage { stage, count }),
            None => Ok(()),
        }
    }

    pub fn finish(&mut self, status: RunStatus) {
        self.status = status;
        self.finished_at = Some(now());
    }
}

/// Times one stage and records it on drop-free completion via [`StageTimer::done`].
pub struct StageTimer {
    name: String,
    start: Instant,
    pub session_hashes: Vec<String>,
    pub detail: BTreeMap<String, serde_json::Value>,
}

impl StageTimer {
    pub fn start(name: impl Into<String>) -> Self {
        StageTimer { name: name.into(), start: Instant::now(), session_hashes: Vec::new(), detail: BTreeMap::new() }
    }

    pub fn note(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.detail.insert(key.into(), value.into());
    }

    pub fn done(self, manifest: &mut RunManifest) {
        manifest.stages.push(StageRecord {
            name: self.name,
            status: StageStatus::Ran,
            millis: u64::try_from(self.start.elapsed().as_millis()).unwrap_or(u64::MAX),
            session_hashes: self.session_hashes,
            detail: self.detail,
        });
    }
}
