//! Session/bundle data model, validation, splitting and summary statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Guards float slicing against representation error (e.g. `0.7 * 10`).
pub(crate) const RATIO_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("session {session}: {message}")]
    InvalidSession { session: String, message: String },
    #[error("session {session}, bundle {bundle}: {message}")]
    InvalidBundle { session: String, bundle: String, message: String },
    #[error("duplicate session id {0}")]
    DuplicateSession(String),
    #[error("invalid split ratios: {0}")]
    InvalidSplit(String),
    #[error("need at least 3 sessions to split, got {0}")]
    TooFewSessions(usize),
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub title: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub id: String,
    pub item_ids: Vec<String>,
    #[serde(default)]
    pub intent: Option<String>,
}

impl Bundle {
    pub fn item_set(&self) -> BTreeSet<String> {
        self.item_ids.iter().cloned().collect()
    }
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    #[serde(rename = "session_id")]
    pub id: String,
    pub user_id: String,
    pub items: Vec<Item>,
    #[serde(default)]
    pub bundles: Vec<Bundle>,
}

impl Session {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: &str| CorpusError::InvalidSession {
            session: self.id.clone(),
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty session id"));
        }
        if self.items.len() < 2 {
            return Err(invalid("session has fewer than 2 items"));
        }
        let mut ids = BTreeSet::new();
        for item in &self.items {
            if item.id.is_empty() {
                return Err(invalid("empty item id"));
            }
            if item.category.is_empty() {
                return Err(CorpusError::InvalidSession {
                    session: self.id.clone(),
                    message: format!("item {} has an empty category", item.id),
                });
            }
            if !ids.insert(item.id.as_str()) {
                return Err(CorpusError::InvalidSession {
                    session: self.id.clone(),
                    message: format!("duplicate item id {}", item.id),
                });
            }
        }
        let mut bundle_ids = BTreeSet::new();
        for bundle in &self.bundles {
            let bad = |message: String| CorpusError::InvalidBundle {
                session: self.id.clone(),
                bundle: bundle.id.clone(),
                message,
            };
            if !bundle_ids.insert(bundle.id.as_str()) {
                return Err(bad("duplicate bundle id".to_string()));
            }
            if bundle.item_ids.len() < 2 {
                return Err(bad("bundle size < 2".to_string()));
            }
            let mut seen = BTreeSet::new();
            for item_id in &bundle.item_ids {
                if !ids.contains(item_id.as_str()) {
                    return Err(bad(format!("unknown item id {item_id}")));
                }
                if !seen.insert(item_id.as_str()) {
                    return Err(bad(format!("duplicate item id {item_id}")));
                }
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> BTreeSet<String> {
        self.items.iter().map(|i| i.category.clone()).collect()
    }

    pub fn item(&self, id: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.id == id)
    }

    /// 1-based position of an item, as used for `productN` ids in prompts.
    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.id == id).map(|p| p + 1)
    }
}

/// Distinct categories over the items of `s`.
pub fn session_categories(s: &Session) -> BTreeSet<String> {
    s.categories()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Electronic,
    Clothing,
    Food,
    Custom(String),
}

impl Domain {
    pub fn as_str(&self) -> &str {
        match self {
            Domain::Electronic => "electronic",
            Domain::Clothing => "clothing",
            Domain::Food => "food",
            Domain::Custom(name) => name,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "e" | "electronic" | "electronics" => Domain::Electronic,
            "c" | "clothing" => Domain::Clothing,
            "f" | "food" => Domain::Food,
            "" => return Err(CorpusError::UnknownDomain(s.to_string())),
            _ if lower.contains(['.', '/', '\\']) => {
                return Err(CorpusError::UnknownDomain(s.to_string()))
            }
            _ => Domain::Custom(lower),
        })
    }
}

impl Serialize for Domain {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub domain: Domain,
    pub sessions: Vec<Session>,
}

impl Dataset {
    /// Builds a dataset, enforcing every session and bundle invariant.
    pub fn new(domain: Domain, sessions: Vec<Session>) -> Result<Self, CorpusError> {
        let mut ids = BTreeSet::new();
        for s in &sessions {
            s.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateSession(s.id.clone()));
            }
        }
        Ok(Dataset { domain, sessions })
    }

    /// Parses the JSONL dataset format, one session per line. Blank lines are skipped.
    pub fn from_jsonl(domain: Domain, text: &str) -> Result<Self, CorpusError> {
        let mut sessions = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let session: Session = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            sessions.push(session);
        }
        Dataset::new(domain, sessions)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sessions {
            // Session serialization cannot fail: all fields are strings and lists.
            out.push_str(&serde_json::to_string(s).expect("session serializes"));
            out.push('\n');
        }
        out
    }

    pub fn session(&self, id: &str) -> Option<&Session> {
        self.sessions.iter().find(|s| s.id == id)
    }

    pub fn session_ids(&self) -> BTreeSet<String> {
        self.sessions.iter().map(|s| s.id.clone()).collect()
    }

    pub fn category_vocabulary(&self) -> BTreeSet<String> {
        self.sessions.iter().flat_map(|s| s.categories()).collect()
    }

    /// Subset of this dataset restricted to `ids`, in dataset order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            domain: self.domain.clone(),
            sessions: self.sessions.iter().filter(|s| ids.contains(&s.id)).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_ratio: 0.7, valid_ratio: 0.1, test_ratio: 0.2, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (name, r) in [
            ("train", self.train_ratio),
            ("valid", self.valid_ratio),
            ("test", self.test_ratio),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return Err(CorpusError::InvalidSplit(format!("{name} ratio {r} not in (0,1)")));
            }
        }
        let sum = self.train_ratio + self.valid_ratio + self.test_ratio;
        if (sum - 1.0).abs() > RATIO_EPS {
            return Err(CorpusError::InvalidSplit(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// (train, valid, test) sizes for `n` sessions; test takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = libm::floor(n as f64 * self.train_ratio + RATIO_EPS) as usize;
        let valid = libm::floor(n as f64 * self.valid_ratio + RATIO_EPS) as usize;
        let valid = valid.min(n - train);
        (train, valid, n - train - valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Shuffles sessions (ordered by id first) with a seeded PRNG, then slices.
pub fn split_dataset(d: &Dataset, spec: &SplitSpec) -> Result<Split, CorpusError> {
    spec.validate()?;
    let n = d.sessions.len();
    if n < 3 {
        return Err(CorpusError::TooFewSessions(n));
    }
    let mut order: Vec<&Session> = d.sessions.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let (n_train, n_valid, _) = spec.sizes(n);
    let part = |slice: &[&Session]| Dataset {
        domain: d.domain.clone(),
        sessions: slice.iter().map(|s| (*s).clone()).collect(),
    };
    Ok(Split {
        train: part(&order[..n_train]),
        valid: part(&order[n_train..n_train + n_valid]),
        test: part(&order[n_train + n_valid..]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub sessions: usize,
    pub bundles: usize,
    pub intents: usize,
    pub average_bundle_size: f64,
}

pub fn dataset_stats(d: &Dataset) -> DatasetStats {
    let users: BTreeSet<&str> = d.sessions.iter().map(|s| s.user_id.as_str()).collect();
    let items: BTreeSet<&str> =
        d.sessions.iter().flat_map(|s| s.items.iter().map(|i| i.id.as_str())).collect();
    let bundles: Vec<&Bundle> = d.sessions.iter().flat_map(|s| s.bundles.iter()).collect();
    let intents: BTreeSet<&str> = bundles
        .iter()
        .filter_map(|b| b.intent.as_deref())
        .map(str::trim)
        .filter(|i| !i.is_empty())
        .collect();
    let total: usize = bundles.iter().map(|b| b.item_ids.len()).sum();
    let average_bundle_size =
        if bundles.is_empty() { 0.0 } else { total as f64 / bundles.len() as f64 };
    DatasetStats {
        users: users.len(),
        items: items.len(),
        sessions: d.sessions.len(),
        bundles: bundles.len(),
        intents: intents.len(),
        average_bundle_size,
    }
}

/// Item lookup by id across a session; convenient for callers holding ids.
pub fn item_index(s: &Session) -> BTreeMap<&str, &Item> {
    s.items.iter().map(|i| (i.id.as_str(), i)).collect()
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use alloc::vec;

    #[test]
    fn loads_three_sessions() {
        let d = Dataset::new(
            Domain::Food,
            vec![simple("s1", 3), simple("s2", 4), simple("s3", 2)],
        )
        .unwrap();
        let text = d.to_jsonl();
        let back = Dataset::from_jsonl(Domain::Food, &text).unwrap();
        assert_eq!(back.sessions.len(), 3);
        assert_eq!(back, d);
    }

    #[test]
    fn unknown_item_names_bundle() {
        let s = session("s1", &[("a", "c1"), ("b", "c2")], vec![bundle("bx", &["a", "zz"])]);
        let err = Dataset::new(Domain::Food, vec![s]).unwrap_err();
        match err {
            CorpusError::InvalidBundle { bundle, .. } => assert_eq!(bundle, "bx"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn singleton_bundle_rejected() {
        let s = session("s1", &[("a", "c1"), ("b", "c2")], vec![bundle("b1", &["a"])]);
        let err = Dataset::new(Domain::Food, vec![s]).unwrap_err();
        assert!(err.to_string().contains("bundle size < 2"), "{err}");
    }

    #[test]
    fn short_session_and_empty_category_rejected() {
        let s = session("s1", &[("a", "c1")], vec![]);
        assert!(Dataset::new(Domain::Food, vec![s]).is_err());
        let s = session("s1", &[("a", "c1"), ("b", "")], vec![]);
        assert!(Dataset::new(Domain::Food, vec![s]).is_err());
    }

    #[test]
    fn duplicate_session_rejected() {
        let err = Dataset::new(Domain::Food, vec![simple("s", 2), simple("s", 3)]).unwrap_err();
        assert_eq!(err, CorpusError::DuplicateSession("s".into()));
    }

    #[test]
    fn parse_error_has_line_number() {
        let good = serde_json::to_string(&simple("s1", 2)).unwrap();
        let text = format!("{good}\n{{not json\n");
        match Dataset::from_jsonl(Domain::Food, &text).unwrap_err() {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlapping_bundles_allowed() {
        let s = session(
            "s1",
            &[("a", "c1"), ("b", "c2"), ("c", "c3")],
            vec![bundle("b1", &["a", "b"]), bundle("b2", &["b", "c"])],
        );
        assert!(Dataset::new(Domain::Food, vec![s]).is_ok());
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(10), (7, 1, 2));
        assert_eq!(spec.sizes(1161), (812, 116, 233));
        assert_eq!(spec.sizes(1145), (801, 114, 230));
    }

    #[test]
    fn split_is_partition_and_deterministic() {
        let sessions = (0..10).map(|k| simple(&format!("s{k}"), 3)).collect();
        let d = Dataset::new(Domain::Food, sessions).unwrap();
        let spec = SplitSpec { seed: 7, ..SplitSpec::default() };
        let a = split_dataset(&d, &spec).unwrap();
        let b = split_dataset(&d, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            (a.train.sessions.len(), a.valid.sessions.len(), a.test.sessions.len()),
            (7, 1, 2)
        );
        let mut all = a.train.session_ids();
        let n = all.len();
        all.extend(a.valid.session_ids());
        all.extend(a.test.session_ids());
        assert_eq!(all.len(), 10);
        assert_eq!(n, 7);
        assert_eq!(all, d.session_ids());
    }

    #[test]
    fn split_rejects_bad_inputs() {
        let d = Dataset::new(Domain::Food, vec![simple("a", 2), simple("b", 2)]).unwrap();
        assert_eq!(
            split_dataset(&d, &SplitSpec::default()).unwrap_err(),
            CorpusError::TooFewSessions(2)
        );
        let spec = SplitSpec { train_ratio: 0.8, ..SplitSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn categories_are_a_set() {
        let s = session("s", &[("a", "c1"), ("b", "c1"), ("c", "c2")], vec![]);
        let cats: Vec<String> = session_categories(&s).into_iter().collect();
        assert_eq!(cats, vec!["c1".to_string(), "c2".to_string()]);
        let s = session("s", &[("a", "c1"), ("b", "c1")], vec![]);
        assert_eq!(session_categories(&s).len(), 1);
    }

    #[test]
    fn stats_average_and_empty() {
        let s1 = session("s1", &[("a", "c1"), ("b", "c2")], vec![bundle("b1", &["a", "b"])]);
        let s2 = session(
            "s2",
            &[("c", "c1"), ("d", "c2"), ("e", "c3"), ("f", "c4")],
            vec![bundle("b2", &["c", "d", "e", "f"])],
        );
        let d = Dataset::new(Domain::Food, vec![s1, s2]).unwrap();
        let st = dataset_stats(&d);
        assert_eq!(st.average_bundle_size, 3.0);
        assert_eq!((st.users, st.items, st.sessions, st.bundles, st.intents), (2, 6, 2, 2, 2));

        let empty = Dataset::new(Domain::Food, vec![]).unwrap();
        let st = dataset_stats(&empty);
        assert_eq!(st.average_bundle_size, 0.0);
        assert_eq!(st.sessions, 0);
    }

    #[test]
    fn domain_parsing() {
        assert_eq!("e".parse::<Domain>().unwrap(), Domain::Electronic);
        assert_eq!("Food".parse::<Domain>().unwrap(), Domain::Food);
        assert_eq!("books".parse::<Domain>().unwrap(), Domain::Custom("books".into()));
        assert!("../x".parse::<Domain>().is_err());
    }
}
