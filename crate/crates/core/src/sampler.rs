//! Stratified sampling of training sessions.
//!
//! Sessions are grouped by strategy, each group is shuffled once with a
//! seeded PRNG, and the first `ceil(ratio * |group|)` sessions are taken.
//! Because the per-group order does not depend on the ratio, samples are
//! nested: a smaller ratio always selects a subset of a larger one.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Session, RATIO_EPS};
use crate::digest::seed_from;
use crate::evaluator::{difficulty_from_eval, SessionEval};

pub const DEFAULT_RATIOS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SampleError {
    #[error("cannot sample from an empty dataset")]
    EmptyDataset,
    #[error("sampling ratio {0} not in (0, 1]")]
    InvalidRatio(f64),
    #[error("missing teacher evaluation for session {0}")]
    MissingDifficulty(String),
    #[error("unknown sampling strategy {0:?}")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Length,
    Diversity,
    Difficulty,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::Random, Strategy::Length, Strategy::Diversity, Strategy::Difficulty];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Length => "length",
            Strategy::Diversity => "diversity",
            Strategy::Difficulty => "difficulty",
        }
    }

    /// Group labels in ascending score order.
    fn labels(self) -> [&'static str; 3] {
        match self {
            Strategy::Random => ["all", "all", "all"],
            Strategy::Length => ["short", "medium", "long"],
            Strategy::Diversity => ["low", "medium", "high"],
            // low recall is hard
            Strategy::Difficulty => ["hard", "medium", "easy"],
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SampleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| SampleError::UnknownStrategy(s.to_string()))
    }
}

/// Upper bounds (inclusive) of the first two groups. Scores above the
/// second bound land in the third group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub bounds: [f64; 2],
}

impl GroupThresholds {
    /// Session-length ranges [2-4], [5-7], [8-10]; out-of-range lengths clamp.
    pub const LENGTH: GroupThresholds = GroupThresholds { bounds: [4.0, 7.0] };

    fn group_of(&self, score: f64) -> usize {
        if score <= self.bounds[0] {
            0
        } else if score <= self.bounds[1] {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub strategy: Strategy,
    pub ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_thresholds: Option<GroupThresholds>,
}

impl SamplingSpec {
    pub fn new(strategy: Strategy, ratio: f64, seed: u64) -> Self {
        SamplingSpec { strategy, ratio, seed, group_thresholds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleResult {
    pub session_ids: Vec<String>,
    pub group_assignment: BTreeMap<String, String>,
}

/// Distinct categories over items.
pub fn diversity_score(s: &Session) -> f64 {
    if s.items.is_empty() {
        return 0.0;
    }
    s.categories().len() as f64 / s.items.len() as f64
}

pub fn difficulty_score(s: &Session, teacher_eval: Option<&SessionEval>) -> Result<f64, SampleError> {
    teacher_eval
        .map(difficulty_from_eval)
        .ok_or_else(|| SampleError::MissingDifficulty(s.id.clone()))
}

/// Group label per session. `difficulty` maps session id to teacher recall
/// and is required only by [`Strategy::Difficulty`].
pub fn assign_groups(
    d: &Dataset,
    strategy: Strategy,
    thresholds: Option<&GroupThresholds>,
    difficulty: Option<&BTreeMap<String, f64>>,
) -> Result<BTreeMap<String, String>, SampleError> {
    let labels = strategy.labels();
    let mut out = BTreeMap::new();
    let scores: Vec<(&Session, f64)> = match strategy {
        Strategy::Random => {
            for s in &d.sessions {
                out.insert(s.id.clone(), labels[0].to_string());
            }
            return Ok(out);
        }
        Strategy::Length => d.sessions.iter().map(|s| (s, s.items.len() as f64)).collect(),
        Strategy::Diversity => d.sessions.iter().map(|s| (s, diversity_score(s))).collect(),
        Strategy::Difficulty => {
            let mut v = Vec::with_capacity(d.sessions.len());
            for s in &d.sessions {
                let score = difficulty
                    .and_then(|m| m.get(&s.id))
                    .copied()
                    .ok_or_else(|| SampleError::MissingDifficulty(s.id.clone()))?;
                v.push((s, score));
            }
            v
        }
    };

    let fixed = match (strategy, thresholds) {
        (_, Some(t)) => Some(*t),
        (Strategy::Length, None) => Some(GroupThresholds::LENGTH),
        _ => None,
    };
    match fixed {
        Some(t) => {
            for (s, score) in scores {
                out.insert(s.id.clone(), labels[t.group_of(score)].to_string());
            }
        }
        None => {
            // Empirical tertiles: rank by (score, id), cut into thirds.
            let mut ranked = scores;
            ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.id.cmp(&b.0.id)));
            let n = ranked.len();
            for (rank, (s, _)) in ranked.into_iter().enumerate() {
                out.insert(s.id.clone(), labels[rank * 3 / n].to_string());
            }
        }
    }
    Ok(out)
}

pub fn sample(
    d: &Dataset,
    spec: &SamplingSpec,
    difficulty: Option<&BTreeMap<String, f64>>,
) -> Result<SampleResult, SampleError> {
    if d.sessions.is_empty() {
        return Err(SampleError::EmptyDataset);
    }
    if !(spec.ratio > 0.0 && spec.ratio <= 1.0) {
        return Err(SampleError::InvalidRatio(spec.ratio));
    }
    let groups = assign_groups(d, spec.strategy, spec.group_thresholds.as_ref(), difficulty)?;

    let mut members: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    let labels = spec.strategy.labels();
    for (id, label) in &groups {
        let rank = labels.iter().position(|l| l == label).unwrap_or(0);
        members.entry(rank).or_default().push(id);
    }

    let mut result = SampleResult { session_ids: Vec::new(), group_assignment: BTreeMap::new() };
    for (rank, mut ids) in members {
        let label = labels[rank];
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(format!("{}:{label}", spec.seed).as_bytes()));
        // ids arrive sorted from the BTreeMap, so the shuffle is reproducible.
        ids.shuffle(&mut rng);
        let take = take_count(spec.ratio, ids.len());
        for id in ids.into_iter().take(take) {
            result.session_ids.push(id.clone());
            result.group_assignment.insert(id.clone(), label.to_string());
        }
    }
    Ok(result)
}

/// `ceil(ratio * n)`, tolerant of float representation error.
pub fn take_count(ratio: f64, n: usize) -> usize {
    (libm::ceil(ratio * n as f64 - RATIO_EPS) as usize).min(n)
}
