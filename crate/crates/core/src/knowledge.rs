//! Distilled knowledge: formats, keyed storage, deduplication, accumulation
//! across domains and formats, and per-session retrieval of a composite.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, Session};
use crate::pattern::{dedup_patterns, Pattern};
use crate::retrieval::{
    cosine_similarity, retrieve_patterns_for_session, EmbeddingVector, RetrievalError,
    SessionIndex, TextEmbedder,
};
use crate::sampler::SamplingSpec;

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KnowledgeError {
    #[error("no knowledge stored for {0}")]
    MissingKey(KnowledgeKey),
    #[error("format {0} listed more than once")]
    DuplicateFormat(KnowledgeFormat),
    #[error("unknown knowledge format {0:?}")]
    UnknownFormat(String),
    #[error("similarity threshold {0} not in [0, 1]")]
    InvalidThreshold(f64),
    #[error("entry format does not match key {0}")]
    FormatMismatch(KnowledgeKey),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Ordered from least to most abstract; the order is used for composites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeFormat {
    Pattern,
    Rule,
    Thought,
}

impl KnowledgeFormat {
    pub const ALL: [KnowledgeFormat; 3] =
        [KnowledgeFormat::Pattern, KnowledgeFormat::Rule, KnowledgeFormat::Thought];

    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeFormat::Pattern => "pattern",
            KnowledgeFormat::Rule => "rule",
            KnowledgeFormat::Thought => "thought",
        }
    }
}

impl fmt::Display for KnowledgeFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KnowledgeFormat {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().trim_end_matches('s') {
            "pattern" => Ok(KnowledgeFormat::Pattern),
            "rule" => Ok(KnowledgeFormat::Rule),
            "thought" => Ok(KnowledgeFormat::Thought),
            _ => Err(KnowledgeError::UnknownFormat(s.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KnowledgeKey {
    pub domain: Domain,
    pub format: KnowledgeFormat,
}

impl KnowledgeKey {
    pub fn new(domain: Domain, format: KnowledgeFormat) -> Self {
        KnowledgeKey { domain, format }
    }
}

impl fmt::Display for KnowledgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.domain, self.format)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleKnowledge {
    pub text: String,
    pub source_session_id: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtKnowledge {
    pub text: String,
    pub source_session_id: String,
    pub source_bundle_id: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KnowledgeEntry {
    Pattern(Pattern),
    Rule(RuleKnowledge),
    Thought(ThoughtKnowledge),
}

impl KnowledgeEntry {
    pub fn format(&self) -> KnowledgeFormat {
        match self {
            KnowledgeEntry::Pattern(_) => KnowledgeFormat::Pattern,
            KnowledgeEntry::Rule(_) => KnowledgeFormat::Rule,
            KnowledgeEntry::Thought(_) => KnowledgeFormat::Thought,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            KnowledgeEntry::Pattern(_) => None,
            KnowledgeEntry::Rule(r) => Some(&r.text),
            KnowledgeEntry::Thought(t) => Some(&t.text),
        }
    }

    pub fn source_session_id(&self) -> Option<&str> {
        match self {
            KnowledgeEntry::Pattern(_) => None,
            KnowledgeEntry::Rule(r) => Some(&r.source_session_id),
            KnowledgeEntry::Thought(t) => Some(&t.source_session_id),
        }
    }
}

/// Items with a natural-language body, subject to similarity dedup.
pub trait TextKnowledge {
    fn text(&self) -> &str;
}

impl TextKnowledge for RuleKnowledge {
    fn text(&self) -> &str {
        &self.text
    }
}

impl TextKnowledge for ThoughtKnowledge {
    fn text(&self) -> &str {
        &self.text
    }
}

impl TextKnowledge for KnowledgeEntry {
    fn text(&self) -> &str {
        KnowledgeEntry::text(self).unwrap_or("")
    }
}

impl TextKnowledge for String {
    fn text(&self) -> &str {
        self
    }
}

/// Greedy first-wins filter: an entry is kept iff its cosine similarity to
/// every previously kept entry is below `threshold`.
pub fn dedup_text_knowledge<T, E>(
    ks: Vec<T>,
    embedder: &E,
    threshold: f64,
) -> Result<Vec<T>, KnowledgeError>
where
    T: TextKnowledge,
    E: TextEmbedder + ?Sized,
{
    if !(0.0..=1.0).contains(&threshold) {
        return Err(KnowledgeError::InvalidThreshold(threshold));
    }
    if ks.is_empty() {
        return Ok(ks);
    }
    let texts: Vec<&str> = ks.iter().map(TextKnowledge::text).collect();
    let vectors = embedder.embed_batch(&texts)?;
    let vectors: Vec<EmbeddingVector> = vectors.into_iter().map(EmbeddingVector).collect();

    let mut kept_vectors: Vec<&EmbeddingVector> = Vec::new();
    let mut keep = Vec::with_capacity(ks.len());
    for v in &vectors {
        let mut novel = true;
        for k in &kept_vectors {
            if cosine_similarity(v, k)? >= threshold {
                novel = false;
                break;
            }
        }
        if novel {
            kept_vectors.push(v);
        }
        keep.push(novel);
    }
    Ok(ks.into_iter().zip(keep).filter_map(|(k, keep)| keep.then_some(k)).collect())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingSpec>,
    pub dataset_hash: String,
    #[serde(default)]
    pub source_sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeBase {
    entries: BTreeMap<KnowledgeKey, Vec<KnowledgeEntry>>,
    provenance: BTreeMap<KnowledgeKey, Provenance>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores already-deduplicated entries under `key`.
    pub fn insert_deduped(
        &mut self,
        key: KnowledgeKey,
        entries: Vec<KnowledgeEntry>,
        provenance: Provenance,
    ) -> Result<(), KnowledgeError> {
        if entries.iter().any(|e| e.format() != key.format) {
            return Err(KnowledgeError::FormatMismatch(key));
        }
        self.entries.insert(key.clone(), entries);
        self.provenance.insert(key, provenance);
        Ok(())
    }

    pub fn insert_patterns(&mut self, domain: Domain, patterns: &[Pattern], provenance: Provenance) {
        let entries = dedup_patterns(patterns).into_iter().map(KnowledgeEntry::Pattern).collect();
        let key = KnowledgeKey::new(domain, KnowledgeFormat::Pattern);
        self.entries.insert(key.clone(), entries);
        self.provenance.insert(key, provenance);
    }

    /// Dedups text entries at `threshold` before storing.
    pub fn insert_text<E: TextEmbedder + ?Sized>(
        &mut self,
        key: KnowledgeKey,
        entries: Vec<KnowledgeEntry>,
        provenance: Provenance,
        embedder: &E,
        threshold: f64,
    ) -> Result<(), KnowledgeError> {
        let deduped = dedup_text_knowledge(entries, embedder, threshold)?;
        self.insert_deduped(key, deduped, provenance)
    }

    pub fn get(&self, key: &KnowledgeKey) -> Result<&[KnowledgeEntry], KnowledgeError> {
        self.entries.get(key).map(Vec::as_slice).ok_or_else(|| KnowledgeError::MissingKey(key.clone()))
    }

    pub fn provenance(&self, key: &KnowledgeKey) -> Option<&Provenance> {
        self.provenance.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &KnowledgeKey> {
        self.entries.keys()
    }

    pub fn count_distinct(&self, key: &KnowledgeKey) -> Result<usize, KnowledgeError> {
        self.get(key).map(<[_]>::len)
    }

    /// Union of one format over several domains, deduplicated again.
    pub fn accumulate_domains<E: TextEmbedder + ?Sized>(
        &self,
        format: KnowledgeFormat,
        domains: &[Domain],
        embedder: &E,
        threshold: f64,
    ) -> Result<Vec<KnowledgeEntry>, KnowledgeError> {
        let mut all = Vec::new();
        for d in domains {
            all.extend_from_slice(self.get(&KnowledgeKey::new(d.clone(), format))?);
        }
        if domains.len() == 1 {
            return Ok(all);
        }
        match format {
            KnowledgeFormat::Pattern => {
                let patterns: Vec<Pattern> = all
                    .into_iter()
                    .filter_map(|e| match e {
                        KnowledgeEntry::Pattern(p) => Some(p),
                        _ => None,
                    })
                    .collect();
                Ok(dedup_patterns(&patterns).into_iter().map(KnowledgeEntry::Pattern).collect())
            }
            _ => dedup_text_knowledge(all, embedder, threshold),
        }
    }

    /// Several formats of one domain, in canonical pattern/rule/thought order.
    pub fn accumulate_formats(
        &self,
        domain: &Domain,
        formats: &[KnowledgeFormat],
    ) -> Result<CompositeKnowledge, KnowledgeError> {
        let formats = canonical_formats(formats)?;
        let mut sections = Vec::new();
        for format in formats {
            let entries = self.get(&KnowledgeKey::new(domain.clone(), format))?.to_vec();
            sections.push(KnowledgeSection { format, entries });
        }
        Ok(CompositeKnowledge { sections })
    }

    /// Domains x formats: each format accumulated across domains, then composed.
    pub fn accumulate<E: TextEmbedder + ?Sized>(
        &self,
        domains: &[Domain],
        formats: &[KnowledgeFormat],
        embedder: &E,
        threshold: f64,
    ) -> Result<CompositeKnowledge, KnowledgeError> {
        let formats = canonical_formats(formats)?;
        let mut sections = Vec::new();
        for format in formats {
            let entries = self.accumulate_domains(format, domains, embedder, threshold)?;
            sections.push(KnowledgeSection { format, entries });
        }
        Ok(CompositeKnowledge { sections })
    }
}

fn canonical_formats(formats: &[KnowledgeFormat]) -> Result<Vec<KnowledgeFormat>, KnowledgeError> {
    let mut seen = BTreeSet::new();
    for f in formats {
        if !seen.insert(*f) {
            return Err(KnowledgeError::DuplicateFormat(*f));
        }
    }
    Ok(seen.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSection {
    pub format: KnowledgeFormat,
    pub entries: Vec<KnowledgeEntry>,
}

/// Format-tagged knowledge sections in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompositeKnowledge {
    pub sections: Vec<KnowledgeSection>,
}

impl CompositeKnowledge {
    pub fn is_empty(&self) -> bool {
        self.sections.iter().all(|s| s.entries.is_empty())
    }

    pub fn formats(&self) -> Vec<KnowledgeFormat> {
        self.sections.iter().map(|s| s.format).collect()
    }

    pub fn section(&self, format: KnowledgeFormat) -> Option<&KnowledgeSection> {
        self.sections.iter().find(|s| s.format == format)
    }

    /// Sessions that contributed text knowledge of `format`.
    pub fn source_sessions(&self, format: KnowledgeFormat) -> BTreeSet<&str> {
        self.section(format)
            .map(|s| s.entries.iter().filter_map(KnowledgeEntry::source_session_id).collect())
            .unwrap_or_default()
    }

    /// Knowledge to show for `target`: patterns by category subset, rules
    /// and thoughts from the most similar source session in `index` (the
    /// target itself is never its own source). Empty sections are dropped.
    pub fn retrieve_for_session(
        &self,
        target: &Session,
        target_vector: Option<&EmbeddingVector>,
        index: Option<&SessionIndex>,
    ) -> Result<CompositeKnowledge, KnowledgeError> {
        let mut sections = Vec::new();
        for section in &self.sections {
            let entries: Vec<KnowledgeEntry> = match section.format {
                KnowledgeFormat::Pattern => {
                    let patterns: Vec<Pattern> = section
                        .entries
                        .iter()
                        .filter_map(|e| match e {
                            KnowledgeEntry::Pattern(p) => Some(p.clone()),
                            _ => None,
                        })
                        .collect();
                    retrieve_patterns_for_session(target, &patterns)
                        .into_iter()
                        .map(KnowledgeEntry::Pattern)
                        .collect()
                }
                format => {
                    let (Some(v), Some(index)) = (target_vector, index) else {
                        return Err(KnowledgeError::Retrieval(RetrievalError::EmptyPool));
                    };
                    let sources = self.source_sessions(format);
                    if sources.iter().all(|s| *s == target.id) {
                        Vec::new()
                    } else {
                        let nearest = crate::retrieval::retrieve_nearest_session(target, v, index, |id| {
                            sources.contains(id)
                        })?;
                        section
                            .entries
                            .iter()
                            .filter(|e| e.source_session_id() == Some(nearest.as_str()))
                            .cloned()
                            .collect()
                    }
                }
            };
            if !entries.is_empty() {
                sections.push(KnowledgeSection { format: section.format, entries });
            }
        }
        Ok(CompositeKnowledge { sections })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::*;
    use crate::retrieval::HashEmbedder;
    use alloc::string::ToString;
    use alloc::vec;

    fn rule(text: &str, session: &str, domain: Domain) -> KnowledgeEntry {
        KnowledgeEntry::Rule(RuleKnowledge {
            text: text.into(),
            source_session_id: session.into(),
            domain,
        })
    }

    /// Maps each text to a one-hot axis by first byte.
    struct AxisEmbedder;

    impl TextEmbedder for AxisEmbedder {
        fn dimension(&self) -> usize {
            256
        }
        fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
            let mut v = vec![0.0; 256];
            v[*text.as_bytes().first().unwrap_or(&0) as usize] = 1.0;
            Ok(v)
        }
        fn fingerprint(&self) -> String {
            "axis".into()
        }
    }

    /// All-positive vectors: every pair has cosine > 0.
    struct PositiveEmbedder;

    impl TextEmbedder for PositiveEmbedder {
        fn dimension(&self) -> usize {
            3
        }
        fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
            let b = text.len() as f64;
            Ok(vec![1.0, b, 1.0 / (b + 1.0)])
        }
        fn fingerprint(&self) -> String {
            "positive".into()
        }
    }

    /// Pairwise oracle: entry j survives iff no kept i < j is too similar.
    fn brute_dedup(texts: &[&str], e: &dyn TextEmbedder, threshold: f64) -> Vec<String> {
        let mut kept: Vec<&str> = Vec::new();
        for t in texts {
            let v = EmbeddingVector(e.embed(t).unwrap());
            let dup = kept.iter().any(|k| {
                let w = EmbeddingVector(e.embed(k).unwrap());
                cosine_similarity(&v, &w).unwrap() >= threshold
            });
            if !dup {
                kept.push(t);
            }
        }
        kept.into_iter().map(String::from).collect()
    }

    #[test]
    fn text_dedup_cases() {
        let e = HashEmbedder::default();
        let two = vec!["same rule".to_string(), "same rule".to_string()];
        assert_eq!(dedup_text_knowledge(two, &e, 0.8).unwrap().len(), 1);

        let distinct: Vec<String> = ["alpha", "beta", "gamma"].iter().map(|s| s.to_string()).collect();
        assert_eq!(dedup_text_knowledge(distinct.clone(), &AxisEmbedder, 0.8).unwrap(), distinct);

        let texts = ["a", "bb", "ccc", "dddd"];
        let owned: Vec<String> = texts.iter().map(|s| s.to_string()).collect();
        let kept = dedup_text_knowledge(owned, &PositiveEmbedder, 0.0).unwrap();
        assert_eq!(kept, brute_dedup(&texts, &PositiveEmbedder, 0.0));
        assert_eq!(kept, vec!["a".to_string()]);

        assert_eq!(
            dedup_text_knowledge(Vec::<String>::new(), &e, 1.5).unwrap_err(),
            KnowledgeError::InvalidThreshold(1.5)
        );
    }

    #[test]
    fn tighter_threshold_keeps_fewer() {
        let texts: Vec<String> = (0..30).map(|k| "x".repeat(k % 7 + 1)).collect();
        let mut last = usize::MAX;
        for t in [1.0, 0.9, 0.8, 0.5, 0.2, 0.0] {
            let n = dedup_text_knowledge(texts.clone(), &PositiveEmbedder, t).unwrap().len();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn domain_accumulation() {
        let e = HashEmbedder::default();
        let mut kb = KnowledgeBase::new();
        for (d, text) in [(Domain::Electronic, "r1"), (Domain::Clothing, "r2"), (Domain::Food, "r3")] {
            kb.insert_text(
                KnowledgeKey::new(d.clone(), KnowledgeFormat::Rule),
                vec![rule(text, "s", d), rule("shared", "s", Domain::Food)],
                Provenance::default(),
                &e,
                0.8,
            )
            .unwrap();
        }
        let all = [Domain::Electronic, Domain::Clothing, Domain::Food];
        let acc = kb.accumulate_domains(KnowledgeFormat::Rule, &all, &e, 0.8).unwrap();
        // r1, r2, r3 plus a single "shared"
        assert_eq!(acc.len(), 4);
        let single = kb.accumulate_domains(KnowledgeFormat::Rule, &all[..1], &e, 0.8).unwrap();
        assert_eq!(single, kb.get(&KnowledgeKey::new(Domain::Electronic, KnowledgeFormat::Rule)).unwrap());
        assert!(matches!(
            kb.accumulate_domains(KnowledgeFormat::Thought, &all, &e, 0.8),
            Err(KnowledgeError::MissingKey(_))
        ));
    }

    #[test]
    fn format_accumulation_order() {
        let mut kb = KnowledgeBase::new();
        let d = Domain::Food;
        kb.insert_patterns(d.clone(), &[Pattern::new(["a", "b"], 2)], Provenance::default());
        kb.insert_deduped(
            KnowledgeKey::new(d.clone(), KnowledgeFormat::Rule),
            vec![rule("r", "s1", d.clone())],
            Provenance::default(),
        )
        .unwrap();
        kb.insert_deduped(KnowledgeKey::new(d.clone(), KnowledgeFormat::Thought), vec![], Provenance::default())
            .unwrap();
        let one = kb.accumulate_formats(&d, &[KnowledgeFormat::Pattern]).unwrap();
        assert_eq!(one.sections.len(), 1);
        let all = kb
            .accumulate_formats(&d, &[KnowledgeFormat::Thought, KnowledgeFormat::Pattern, KnowledgeFormat::Rule])
            .unwrap();
        assert_eq!(all.formats(), KnowledgeFormat::ALL.to_vec());
        assert_eq!(
            kb.accumulate_formats(&d, &[KnowledgeFormat::Rule, KnowledgeFormat::Rule]),
            Err(KnowledgeError::DuplicateFormat(KnowledgeFormat::Rule))
        );
    }

    #[test]
    fn counting() {
        let mut kb = KnowledgeBase::new();
        kb.insert_patterns(
            Domain::Food,
            &[Pattern::new(["c1", "c2"], 2), Pattern::new(["c2", "c1"], 5)],
            Provenance::default(),
        );
        let key = KnowledgeKey::new(Domain::Food, KnowledgeFormat::Pattern);
        assert_eq!(kb.count_distinct(&key).unwrap(), 1);
        let rules: Vec<KnowledgeEntry> =
            (0..348).map(|k| rule(&alloc::format!("rule {k}"), "s", Domain::Electronic)).collect();
        let rkey = KnowledgeKey::new(Domain::Electronic, KnowledgeFormat::Rule);
        kb.insert_deduped(rkey.clone(), rules, Provenance::default()).unwrap();
        assert_eq!(kb.count_distinct(&rkey).unwrap(), 348);
        let tkey = KnowledgeKey::new(Domain::Food, KnowledgeFormat::Thought);
        kb.insert_deduped(tkey.clone(), vec![], Provenance::default()).unwrap();
        assert_eq!(kb.count_distinct(&tkey).unwrap(), 0);
        assert!(kb.count_distinct(&KnowledgeKey::new(Domain::Clothing, KnowledgeFormat::Rule)).is_err());
        assert!(kb.insert_deduped(tkey, vec![rule("x", "s", Domain::Food)], Provenance::default()).is_err());
    }

    #[test]
    fn per_session_retrieval() {
        let e = HashEmbedder::default();
        let mk = |id: &str, title: &str| {
            let mut s = session(id, &[("a", "c1"), ("b", "c2")], vec![]);
            s.items[0].title = title.into();
            s.items[1].title = title.into();
            s
        };
        let train = vec![mk("s1", "camera"), mk("s2", "shoe")];
        let index = SessionIndex::build(&train, &e).unwrap();
        let composite = CompositeKnowledge {
            sections: vec![
                KnowledgeSection {
                    format: KnowledgeFormat::Pattern,
                    entries: vec![
                        KnowledgeEntry::Pattern(Pattern::new(["c1", "c2"], 3)),
                        KnowledgeEntry::Pattern(Pattern::new(["c1", "c9"], 3)),
                    ],
                },
                KnowledgeSection {
                    format: KnowledgeFormat::Rule,
                    entries: vec![rule("camera rule", "s1", Domain::Food), rule("shoe rule", "s2", Domain::Food)],
                },
            ],
        };
        let target = mk("t", "shoe");
        let v = crate::retrieval::embed_session(&target, &e).unwrap();
        let got = composite.retrieve_for_session(&target, Some(&v), Some(&index)).unwrap();
        assert_eq!(got.sections.len(), 2);
        assert_eq!(got.sections[0].entries, vec![KnowledgeEntry::Pattern(Pattern::new(["c1", "c2"], 3))]);
        assert_eq!(got.sections[1].entries, vec![rule("shoe rule", "s2", Domain::Food)]);

        // A training session never retrieves its own rules.
        let own = composite.retrieve_for_session(&train[1], Some(&v), Some(&index)).unwrap();
        assert_eq!(own.sections[1].entries, vec![rule("camera rule", "s1", Domain::Food)]);
    }

    #[test]
    fn entry_serde_is_tagged() {
        let v = serde_json::to_value(rule("x", "s", Domain::Food)).unwrap();
        assert_eq!(v["kind"], "rule");
        assert_eq!(v["domain"], "food");
        let p = serde_json::to_value(KnowledgeEntry::Pattern(Pattern::new(["a", "b"], 2))).unwrap();
        assert_eq!(p["kind"], "pattern");
        assert_eq!(p["support"], 2);
    }
}
