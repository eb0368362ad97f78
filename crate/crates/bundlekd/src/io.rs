//! Dataset, JSON and JSONL files.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use bundlekd_core::corpus::CorpusError;
use bundlekd_core::digest::sha256_hex;
use bundlekd_core::{Dataset, Domain, Session};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("{path}:{line}: {message}")]
    Json { path: PathBuf, line: usize, message: String },
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io_err(parent))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::Json { path: path.into(), line: e.line(), message: e.to_string() })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// One value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line)
            .map_err(|e| IoError::Json { path: path.into(), line: k + 1, message: e.to_string() })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<(), IoError> {
    let mut text = String::new();
    for v in values {
        text.push_str(&serde_json::to_string(v).expect("value serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn load_dataset(path: &Path, domain: Domain) -> Result<Dataset, IoError> {
    let text = read_text(path)?;
    Dataset::from_jsonl(domain, &text).map_err(|source| IoError::Corpus { path: path.into(), source })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<(), IoError> {
    write_atomic(path, d.to_jsonl().as_bytes())
}

pub fn file_hash(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Content hash of one session's canonical JSON line.
pub fn session_hash(s: &Session) -> String {
    sha256_hex(serde_json::to_string(s).expect("session serializes").as_bytes())
}

/// Session hashes in id order.
pub fn session_hashes<'a>(sessions: impl IntoIterator<Item = &'a Session>) -> Vec<String> {
    let mut v: Vec<(&str, String)> = sessions.into_iter().map(|s| (s.id.as_str(), session_hash(s))).collect();
    v.sort();
    v.into_iter().map(|(_, h)| h).collect()
}
