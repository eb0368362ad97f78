//! Session embeddings and knowledge retrieval for in-context prompting.
//!
//! Patterns are retrieved by category subset matching. Rules and thoughts
//! come from the nearest training session by cosine similarity of
//! mean-pooled, L2-normalized title embeddings.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Session;
use crate::digest::{seed_from, sha256_hex};
use crate::pattern::Pattern;

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RetrievalError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding dimension {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("session {0} has no items to embed")]
    EmptySession(String),
    #[error("vector for {0} is not unit norm")]
    NotNormalized(String),
    #[error("no candidate sessions to retrieve from")]
    EmptyPool,
}

/// Anything that maps text to a fixed-length vector.
pub trait TextEmbedder {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    /// Identifies provider and model; stored alongside built indices.
    fn fingerprint(&self) -> String;
}

impl<T: TextEmbedder + ?Sized> TextEmbedder for &T {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        (**self).embed_batch(texts)
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

/// Deterministic mock: each text seeds a PRNG that fills a vector with
/// values in [-1, 1). Distinct texts are nearly orthogonal in high dimension.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dimension: 256 }
    }
}

impl TextEmbedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(text.as_bytes()));
        Ok((0..self.dimension).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn fingerprint(&self) -> String {
        alloc::format!("hash-mock/{}", self.dimension)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(dot(&self.0, &self.0))
    }

    pub fn normalized(&self) -> Result<EmbeddingVector, RetrievalError> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        let norm = self.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RetrievalError::ZeroVector);
        }
        // Already unit length: keep the bits so stored vectors reload exactly.
        if (norm - 1.0).abs() < 1e-12 {
            return Ok(self.clone());
        }
        Ok(EmbeddingVector(self.0.iter().map(|v| v / norm).collect()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dimension() != b.dimension() {
        return Err(RetrievalError::DimensionMismatch { expected: a.dimension(), got: b.dimension() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean of the item-title embeddings, L2-normalized.
pub fn embed_session<E: TextEmbedder + ?Sized>(
    s: &Session,
    embedder: &E,
) -> Result<EmbeddingVector, RetrievalError> {
    if s.items.is_empty() {
        return Err(RetrievalError::EmptySession(s.id.clone()));
    }
    let titles: Vec<&str> = s.items.iter().map(|i| i.title.as_str()).collect();
    let vectors = embedder.embed_batch(&titles)?;
    let dim = embedder.dimension();
    let mut mean = alloc::vec![0.0; dim];
    for v in &vectors {
        if v.len() != dim {
            return Err(RetrievalError::DimensionMismatch { expected: dim, got: v.len() });
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    EmbeddingVector(mean).normalized()
}

/// Unit-norm session vectors keyed by session id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionIndex {
    entries: BTreeMap<String, EmbeddingVector>,
    dimension: Option<usize>,
    pub fingerprint: String,
}

/// One line of the precomputed-embedding JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub session_id: String,
    pub vector: EmbeddingVector,
}

impl SessionIndex {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        SessionIndex { entries: BTreeMap::new(), dimension: None, fingerprint: fingerprint.into() }
    }

    pub fn build<'a, E, I>(sessions: I, embedder: &E) -> Result<Self, RetrievalError>
    where
        E: TextEmbedder + ?Sized,
        I: IntoIterator<Item = &'a Session>,
    {
        let mut index = SessionIndex::new(embedder.fingerprint());
        for s in sessions {
            index.insert(s.id.clone(), embed_session(s, embedder)?)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, id: String, v: EmbeddingVector) -> Result<(), RetrievalError> {
        if let Some(d) = self.dimension {
            if v.dimension() != d {
                return Err(RetrievalError::DimensionMismatch { expected: d, got: v.dimension() });
            }
        }
        if v.0.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        if (v.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(RetrievalError::NotNormalized(id));
        }
        self.dimension = Some(v.dimension());
        self.entries.insert(id, v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = IndexEntry> + '_ {
        self.entries
            .iter()
            .map(|(id, v)| IndexEntry { session_id: id.clone(), vector: v.clone() })
    }

    /// The `k` most similar sessions among those accepted by `in_pool`,
    /// most similar first; equal similarity orders by session id.
    pub fn nearest_k(
        &self,
        target: &EmbeddingVector,
        k: usize,
        mut in_pool: impl FnMut(&str) -> bool,
    ) -> Result<Vec<(String, f64)>, RetrievalError> {
        let mut scored: Vec<(&String, f64)> = Vec::new();
        for (id, v) in &self.entries {
            if !in_pool(id) {
                continue;
            }
            scored.push((id, cosine_similarity(target, v)?));
        }
        if scored.is_empty() {
            return Err(RetrievalError::EmptyPool);
        }
        // Stable sort keeps id order among equal scores.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(scored.into_iter().take(k.max(1)).map(|(id, s)| (id.clone(), s)).collect())
    }
}

/// Most similar session to `target` among pool members other than itself.
pub fn retrieve_nearest_session(
    target: &Session,
    target_vector: &EmbeddingVector,
    index: &SessionIndex,
    mut in_pool: impl FnMut(&str) -> bool,
) -> Result<String, RetrievalError> {
    let best = index.nearest_k(target_vector, 1, |id| id != target.id && in_pool(id))?;
    Ok(best.into_iter().next().map(|(id, _)| id).unwrap_or_default())
}

/// Patterns whose categories are all present in the session, ordered by
/// support desc, size desc, then categories.
pub fn retrieve_patterns_for_session(s: &Session, patterns: &[Pattern]) -> Vec<Pattern> {
    let cats = s.categories();
    let mut out: Vec<Pattern> = patterns
        .iter()
        .filter(|p| p.categories.iter().all(|c| cats.contains(c)))
        .map(Pattern::canonical)
        .collect();
    out.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then_with(|| b.categories.len().cmp(&a.categories.len()))
            .then_with(|| a.categories.cmp(&b.categories))
    });
    out.dedup();
    out
}

/// Stable digest of an index's contents, for manifests.
pub fn index_digest(index: &SessionIndex) -> String {
    let mut buf = String::new();
    buf.push_str(&index.fingerprint);
    for (id, v) in &index.entries {
        buf.push('\n');
        buf.push_str(id);
        for x in &v.0 {
            buf.push(' ');
            buf.push_str(&x.to_bits().to_string());
        }
    }
    sha256_hex(buf.as_bytes())
}
