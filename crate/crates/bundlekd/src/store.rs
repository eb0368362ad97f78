//! Knowledge files: `<dir>/<domain>.<format>.json`, one per key, plus the
//! composite file written by `knowledge accumulate`.

use std::fs;
use std::path::{Path, PathBuf};

use bundlekd_core::knowledge::{KnowledgeError, Provenance};
use bundlekd_core::{CompositeKnowledge, Domain, KnowledgeBase, KnowledgeEntry, KnowledgeFormat, KnowledgeKey};
use serde::{Deserialize, Serialize};

use crate::io::{io_err, read_text, write_json, IoError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: schema version {found:?}, this build reads version {SCHEMA_VERSION}")]
    Version { path: PathBuf, found: Option<u64> },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

#[derive(Debug, Serialize, Deserialize)]
struct KeyFile {
    schema_version: u32,
    key: KnowledgeKey,
    provenance: Provenance,
    entries: Vec<KnowledgeEntry>,
}

/// Composite knowledge ready for prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeFile {
    pub schema_version: u32,
    pub domains: Vec<Domain>,
    pub formats: Vec<KnowledgeFormat>,
    pub knowledge: CompositeKnowledge,
}

impl CompositeFile {
    pub fn new(domains: Vec<Domain>, knowledge: CompositeKnowledge) -> Self {
        CompositeFile { schema_version: SCHEMA_VERSION, domains, formats: knowledge.formats(), knowledge }
    }
}

pub fn key_file_name(key: &KnowledgeKey) -> String {
    format!("{key}.json")
}

pub fn persist(kb: &KnowledgeBase, dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut written = Vec::new();
    for key in kb.keys() {
        let file = KeyFile {
            schema_version: SCHEMA_VERSION,
            key: key.clone(),
            provenance: kb.provenance(key).cloned().unwrap_or_default(),
            entries: kb.get(key)?.to_vec(),
        };
        let path = dir.join(key_file_name(key));
        write_json(&path, &file)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a JSON file after checking its `schema_version` header.
fn read_versioned<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| StoreError::Schema { path: path.into(), message: e.to_string() })?;
    let found = value.get("schema_version").and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(SCHEMA_VERSION)) {
        return Err(StoreError::Version { path: path.into(), found });
    }
    serde_json::from_value(value).map_err(|e| StoreError::Schema { path: path.into(), message: e.to_string() })
}

/// `<domain>.<format>.json`; other files (manifests, notes) are ignored.
fn is_key_file(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.strip_suffix(".json")
        .and_then(|stem| stem.rsplit_once('.'))
        .is_some_and(|(domain, format)| !domain.is_empty() && format.parse::<KnowledgeFormat>().is_ok())
}

pub fn load(dir: &Path) -> Result<KnowledgeBase, StoreError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| is_key_file(p))
        .collect();
    paths.sort();
    let mut kb = KnowledgeBase::new();
    for path in paths {
        let file: KeyFile = read_versioned(&path)?;
        let expected = key_file_name(&file.key);
        if path.file_name().and_then(|n| n.to_str()) != Some(expected.as_str()) {
            return Err(StoreError::Schema { path, message: format!("holds key {}, expected file name {expected}", file.key) });
        }
        kb.insert_deduped(file.key, file.entries, file.provenance)?;
    }
    Ok(kb)
}

pub fn save_composite(path: &Path, file: &CompositeFile) -> Result<(), StoreError> {
    Ok(write_json(path, file)?)
}

pub fn load_composite(path: &Path) -> Result<CompositeFile, StoreError> {
    read_versioned(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bundlekd_core::knowledge::RuleKnowledge;
    use bundlekd_core::Pattern;

    fn kb() -> KnowledgeBase {
        let mut kb = KnowledgeBase::new();
        let prov = Provenance { sampling: None, dataset_hash: "abc".into(), source_sessions: 2 };
        kb.insert_patterns(Domain::Food, &[Pattern::new(["a", "b"], 3)], prov.clone());
        let rules = vec![KnowledgeEntry::Rule(RuleKnowledge {
            text: "keep snacks with drinks".into(),
            source_session_id: "s1".into(),
            domain: Domain::Food,
        })];
        kb.insert_deduped(KnowledgeKey::new(Domain::Food, KnowledgeFormat::Rule), rules, prov).unwrap();
        kb
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let written = persist(&kb(), dir.path()).unwrap();
        assert!(written[0].ends_with("food.pattern.json"));
        fs::write(dir.path().join("manifest.json"), "{}").unwrap();
        assert_eq!(load(dir.path()).unwrap(), kb());
    }

    #[test]
    fn missing_dir_and_stale_version() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("absent")), Err(StoreError::Io(_))));
        persist(&kb(), dir.path()).unwrap();
        let path = dir.path().join("food.rule.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 0");
        fs::write(&path, text).unwrap();
        match load(dir.path()) {
            Err(StoreError::Version { found: Some(0), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn composite_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = kb().accumulate_formats(&Domain::Food, &[KnowledgeFormat::Rule, KnowledgeFormat::Pattern]).unwrap();
        let file = CompositeFile::new(vec![Domain::Food], k);
        assert_eq!(file.formats, [KnowledgeFormat::Pattern, KnowledgeFormat::Rule]);
        let path = dir.path().join("combined.json");
        save_composite(&path, &file).unwrap();
        assert_eq!(load_composite(&path).unwrap(), file);
    }
}
