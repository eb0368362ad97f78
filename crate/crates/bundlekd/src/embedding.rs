//! Embedding providers and session-vector files.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bundlekd_core::retrieval::{embed_session, HashEmbedder, IndexEntry, RetrievalError};
use bundlekd_core::{EmbeddingVector, Session, SessionIndex, TextEmbedder};
use serde::{Deserialize, Serialize};

use crate::io::{file_hash, read_jsonl, write_jsonl, IoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Deterministic hash-seeded vectors, for tests and dry runs.
    #[default]
    Hash,
    Openai,
    /// Session vectors read from a JSONL file; text dedup falls back to hashing.
    Precomputed,
}

fn default_dimension() -> usize {
    256
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    #[serde(default)]
    pub kind: EmbedderKind,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<PathBuf>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: EmbedderKind::Hash,
            dimension: default_dimension(),
            base_url: String::new(),
            model: String::new(),
            api_key_env: None,
            batch_size: default_batch(),
            vectors: None,
        }
    }
}

pub type SharedEmbedder = Arc<dyn TextEmbedder + Send + Sync>;

/// `POST {base_url}/embeddings`, memoizing vectors per text.
pub struct HttpEmbedder {
    cfg: EmbedderConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    memo: Mutex<HashMap<String, Vec<f64>>>,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self, RetrievalError> {
        if cfg.base_url.is_empty() || cfg.model.is_empty() {
            return Err(RetrievalError::Provider("embedder needs base_url and model".into()));
        }
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| RetrievalError::Provider(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        Ok(HttpEmbedder { cfg, client, api_key, memo: Mutex::new(HashMap::new()) })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let body = serde_json::json!({ "model": self.cfg.model, "input": texts });
        let url = format!("{}/embeddings", self.cfg.base_url.trim_end_matches('/'));
        let mut delay = Duration::from_millis(500);
        for attempt in 0..4 {
            let mut builder = self
                .client
                .post(&url)
                .header("content-type", "application/json")
                .body(body.to_string());
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let resp = builder.send().map_err(|e| RetrievalError::Provider(e.to_string()))?;
            let status = resp.status().as_u16();
            let text = resp.text().map_err(|e| RetrievalError::Provider(e.to_string()))?;
            if (status == 429 || status >= 500) && attempt < 3 {
                std::thread::sleep(delay);
                delay *= 2;
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(RetrievalError::Provider(format!("HTTP {status}: {text}")));
            }
            let mut reply: EmbeddingReply =
                serde_json::from_str(&text).map_err(|e| RetrievalError::Provider(format!("malformed body: {e}")))?;
            reply.data.sort_by_key(|d| d.index);
            if reply.data.len() != texts.len() {
                return Err(RetrievalError::Provider(format!(
                    "asked for {} embeddings, got {}",
                    texts.len(),
                    reply.data.len()
                )));
            }
            return reply
                .data
                .into_iter()
                .map(|d| {
                    if d.embedding.len() == self.cfg.dimension {
                        Ok(d.embedding)
                    } else {
                        Err(RetrievalError::DimensionMismatch { expected: self.cfg.dimension, got: d.embedding.len() })
                    }
                })
                .collect();
        }
        unreachable!("final attempt always returns")
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let missing: Vec<&str> = {
            let memo = self.memo.lock().unwrap_or_else(|e| e.into_inner());
            let mut seen = std::collections::HashSet::new();
            texts.iter().copied().filter(|t| !memo.contains_key(*t) && seen.insert(*t)).collect()
        };
        for chunk in missing.chunks(self.cfg.batch_size.max(1)) {
            let vectors = self.request(chunk)?;
            let mut memo = self.memo.lock().unwrap_or_else(|e| e.into_inner());
            for (t, v) in chunk.iter().zip(vectors) {
                memo.insert((*t).to_string(), v);
            }
        }
        let memo = self.memo.lock().unwrap_or_else(|e| e.into_inner());
        Ok(texts.iter().map(|t| memo[*t].clone()).collect())
    }

    fn fingerprint(&self) -> String {
        format!("openai:{}@{}", self.cfg.model, self.cfg.base_url)
    }
}

/// Source of unit session vectors: computed from titles, or read from a file.
#[derive(Clone)]
pub enum SessionVectors {
    Embedder(SharedEmbedder),
    Precomputed { vectors: Arc<BTreeMap<String, EmbeddingVector>>, fingerprint: String },
}

impl SessionVectors {
    pub fn vector(&self, s: &Session) -> Result<EmbeddingVector, RetrievalError> {
        match self {
            SessionVectors::Embedder(e) => embed_session(s, e.as_ref()),
            SessionVectors::Precomputed { vectors, .. } => vectors
                .get(&s.id)
                .ok_or_else(|| RetrievalError::Provider(format!("no precomputed vector for session {}", s.id)))?
                .normalized(),
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            SessionVectors::Embedder(e) => e.fingerprint(),
            SessionVectors::Precomputed { fingerprint, .. } => fingerprint.clone(),
        }
    }

    pub fn index<'a>(&self, sessions: impl IntoIterator<Item = &'a Session>) -> Result<SessionIndex, RetrievalError> {
        let mut index = SessionIndex::new(self.fingerprint());
        for s in sessions {
            index.insert(s.id.clone(), self.vector(s)?)?;
        }
        Ok(index)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingSetupError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("precomputed embedder needs a vectors file")]
    MissingVectors,
}

/// Text embedder (for dedup) and session-vector source (for retrieval).
pub fn build_embedder(cfg: &EmbedderConfig) -> Result<(SharedEmbedder, SessionVectors), EmbeddingSetupError> {
    match cfg.kind {
        EmbedderKind::Hash => {
            let e: SharedEmbedder = Arc::new(HashEmbedder { dimension: cfg.dimension });
            Ok((e.clone(), SessionVectors::Embedder(e)))
        }
        EmbedderKind::Openai => {
            let e: SharedEmbedder = Arc::new(HttpEmbedder::new(cfg.clone())?);
            Ok((e.clone(), SessionVectors::Embedder(e)))
        }
        EmbedderKind::Precomputed => {
            let path = cfg.vectors.as_deref().ok_or(EmbeddingSetupError::MissingVectors)?;
            let text: SharedEmbedder = Arc::new(HashEmbedder { dimension: cfg.dimension });
            Ok((text, load_vectors(path)?))
        }
    }
}

pub fn load_vectors(path: &Path) -> Result<SessionVectors, IoError> {
    let entries: Vec<IndexEntry> = read_jsonl(path)?;
    let vectors = entries.into_iter().map(|e| (e.session_id, e.vector)).collect();
    Ok(SessionVectors::Precomputed {
        vectors: Arc::new(vectors),
        fingerprint: format!("precomputed:{}", file_hash(path)?),
    })
}

pub fn save_index(path: &Path, index: &SessionIndex) -> Result<(), IoError> {
    let entries: Vec<IndexEntry> = index.entries().collect();
    write_jsonl(path, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bundlekd_core::{Bundle, Item};

    fn session(id: &str, titles: &[&str]) -> Session {
        Session {
            id: id.into(),
            user_id: "u".into(),
            items: titles
                .iter()
                .enumerate()
                .map(|(k, t)| Item { id: format!("{id}-{k}"), title: (*t).into(), category: "c".into() })
                .collect(),
            bundles: Vec::<Bundle>::new(),
        }
    }

    #[test]
    fn index_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, vectors) = build_embedder(&EmbedderConfig::default()).unwrap();
        let sessions = [session("a", &["x", "y"]), session("b", &["z", "w"])];
        let index = vectors.index(&sessions).unwrap();
        let path = dir.path().join("index.jsonl");
        save_index(&path, &index).unwrap();

        let cfg = EmbedderConfig { kind: EmbedderKind::Precomputed, vectors: Some(path), ..Default::default() };
        let (_, loaded) = build_embedder(&cfg).unwrap();
        for s in &sessions {
            assert_eq!(&loaded.vector(s).unwrap(), index.get(&s.id).unwrap());
        }
        assert!(loaded.vector(&session("c", &["q"])).is_err());
        assert!(loaded.fingerprint().starts_with("precomputed:"));
    }

    #[test]
    fn precomputed_requires_file() {
        let cfg = EmbedderConfig { kind: EmbedderKind::Precomputed, ..Default::default() };
        assert!(matches!(build_embedder(&cfg), Err(EmbeddingSetupError::MissingVectors)));
    }
}
