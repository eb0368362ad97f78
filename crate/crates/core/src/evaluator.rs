//! Session-level Precision/Recall and bundle-level Coverage.
//!
//! A generated bundle is a hit when it equals or is a subset of some
//! ground-truth bundle. Among the qualifying ground-truth bundles it is
//! matched to the one with the largest overlap ratio `|g| / |t|`, ties going
//! to the smaller bundle id. Coverage averages that ratio over hit bundles.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Bundle;

pub type ItemSet = BTreeSet<String>;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("session has no ground-truth bundles")]
    EmptyGroundTruth,
    #[error("no sessions to aggregate")]
    EmptyCorpus,
    #[error("session {0} appears more than once")]
    DuplicateSession(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEval {
    pub precision: f64,
    pub recall: f64,
    pub coverage: f64,
    pub n_generated: usize,
    pub n_hit: usize,
    pub n_gt: usize,
    pub n_recalled: usize,
}

impl SessionEval {
    /// Scores an empty generation against `n_gt` ground-truth bundles.
    pub fn empty(n_gt: usize) -> Self {
        SessionEval {
            precision: 0.0,
            recall: 0.0,
            coverage: 0.0,
            n_generated: 0,
            n_hit: 0,
            n_gt,
            n_recalled: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedHit {
    pub items: Vec<String>,
    pub matched: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitAssignment {
    /// One entry per distinct generated bundle, in canonical set order.
    pub generated: Vec<GeneratedHit>,
    /// Ground-truth bundle id -> recalled.
    pub recalled: BTreeMap<String, bool>,
}

/// Returns the id of the matched ground-truth bundle, if `g` is a hit.
pub fn is_hit<'a>(g: &ItemSet, gt: &'a [Bundle]) -> Option<&'a str> {
    if g.len() < 2 {
        return None;
    }
    let mut best: Option<(&Bundle, usize)> = None;
    for t in gt {
        let tset = t.item_set();
        if !g.is_subset(&tset) {
            continue;
        }
        let size = tset.len();
        // Same numerator |g|, so the largest ratio is the smallest container.
        let better = match best {
            None => true,
            Some((b, bsize)) => size < bsize || (size == bsize && t.id < b.id),
        };
        if better {
            best = Some((t, size));
        }
    }
    best.map(|(b, _)| b.id.as_str())
}

/// Exact sum of small fractions; falls back to float on overflow.
struct FractionSum {
    exact: Option<(u128, u128)>,
    approx: f64,
}

impl FractionSum {
    fn new() -> Self {
        FractionSum { exact: Some((0, 1)), approx: 0.0 }
    }

    fn add(&mut self, num: u128, den: u128) {
        self.approx += num as f64 / den as f64;
        self.exact = self.exact.and_then(|(n, d)| {
            let g = gcd(d, den);
            let lcm = (d / g).checked_mul(den)?;
            let n = n.checked_mul(lcm / d)?.checked_add(num.checked_mul(lcm / den)?)?;
            let r = gcd(n, lcm);
            Some((n / r, lcm / r))
        });
    }

    /// The sum divided by `count`, reduced before the single float division.
    fn mean(&self, count: usize) -> f64 {
        if count == 0 {
            return 0.0;
        }
        match self.exact.and_then(|(n, d)| Some((n, d.checked_mul(count as u128)?))) {
            Some((n, d)) => {
                let g = gcd(n, d);
                (n / g) as f64 / (d / g) as f64
            }
            None => self.approx / count as f64,
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        return 0.0;
    }
    let g = gcd(num as u128, den as u128);
    (num as u128 / g) as f64 / (den as u128 / g) as f64
}

/// Scores one session. Set-equal generated bundles count once; generated
/// bundles with fewer than two items are never hits.
pub fn eval_session(
    generated: &[ItemSet],
    gt: &[Bundle],
) -> Result<(SessionEval, HitAssignment), EvalError> {
    if gt.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let distinct: BTreeSet<&ItemSet> = generated.iter().collect();
    let gt_sets: Vec<ItemSet> = gt.iter().map(Bundle::item_set).collect();

    let mut hits = Vec::with_capacity(distinct.len());
    let mut coverage = FractionSum::new();
    let mut n_hit = 0;
    for g in &distinct {
        let matched = is_hit(g, gt);
        if let Some(id) = matched {
            let t = gt.iter().position(|b| b.id == id).map(|k| gt_sets[k].len()).unwrap_or(1);
            coverage.add(g.len() as u128, t as u128);
            n_hit += 1;
        }
        hits.push(GeneratedHit {
            items: g.iter().cloned().collect(),
            matched: matched.map(String::from),
        });
    }

    let mut recalled = BTreeMap::new();
    for (b, tset) in gt.iter().zip(&gt_sets) {
        let found = distinct.iter().any(|g| g.len() >= 2 && g.is_subset(tset));
        let entry = recalled.entry(b.id.clone()).or_insert(false);
        *entry |= found;
    }
    let n_recalled = recalled.values().filter(|r| **r).count();
    let n_gt = recalled.len();

    let eval = SessionEval {
        precision: ratio(n_hit, distinct.len()),
        recall: ratio(n_recalled, n_gt),
        coverage: coverage.mean(n_hit),
        n_generated: distinct.len(),
        n_hit,
        n_gt,
        n_recalled,
    };
    Ok((eval, HitAssignment { generated: hits, recalled }))
}

/// Difficulty of a session for sampling: the teacher's zero-shot recall.
pub fn difficulty_from_eval(e: &SessionEval) -> f64 {
    e.recall
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Unweighted mean of per-session metrics.
    #[default]
    Macro,
    /// Pooled counts across sessions.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    #[serde(flatten)]
    pub eval: SessionEval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(default)]
    pub config: serde_json::Value,
    pub aggregation: Aggregation,
    #[serde(rename = "macro")]
    pub summary: Metrics,
    pub sessions: Vec<SessionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl Report {
    /// Flat CSV: one row per session followed by the aggregate row.
    pub fn to_csv(&self) -> String {
        use core::fmt::Write;
        let mut out = String::from(
            "session_id,precision,recall,coverage,n_generated,n_hit,n_gt,n_recalled,failure\n",
        );
        for s in &self.sessions {
            let e = &s.eval;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&s.session_id),
                e.precision,
                e.recall,
                e.coverage,
                e.n_generated,
                e.n_hit,
                e.n_gt,
                e.n_recalled,
                csv_field(s.failure.as_deref().unwrap_or("")),
            );
        }
        let m = &self.summary;
        let label = match self.aggregation {
            Aggregation::Macro => "MACRO",
            Aggregation::Micro => "MICRO",
        };
        let _ = writeln!(out, "{label},{},{},{},,,,,", m.precision, m.recall, m.coverage);
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        let mut q = String::from("\"");
        q.push_str(&s.replace('"', "\"\""));
        q.push('"');
        q
    } else {
        String::from(s)
    }
}

/// Aggregates per-session results. Sessions are ordered by id first so the
/// report does not depend on input order.
pub fn aggregate(
    mut sessions: Vec<SessionReport>,
    aggregation: Aggregation,
) -> Result<Report, EvalError> {
    if sessions.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    for w in sessions.windows(2) {
        if w[0].session_id == w[1].session_id {
            return Err(EvalError::DuplicateSession(w[0].session_id.clone()));
        }
    }
    let summary = match aggregation {
        Aggregation::Macro => {
            let n = sessions.len() as f64;
            let (p, r, c) = sessions.iter().fold((0.0, 0.0, 0.0), |(p, r, c), s| {
                (p + s.eval.precision, r + s.eval.recall, c + s.eval.coverage)
            });
            Metrics { precision: p / n, recall: r / n, coverage: c / n }
        }
        Aggregation::Micro => {
            let sum = |f: fn(&SessionEval) -> usize| sessions.iter().map(|s| f(&s.eval)).sum();
            let n_hit: usize = sum(|e| e.n_hit);
            let coverage_mass: f64 =
                sessions.iter().map(|s| s.eval.coverage * s.eval.n_hit as f64).sum();
            Metrics {
                precision: ratio(n_hit, sum(|e| e.n_generated)),
                recall: ratio(sum(|e| e.n_recalled), sum(|e| e.n_gt)),
                coverage: if n_hit == 0 { 0.0 } else { coverage_mass / n_hit as f64 },
            }
        }
    };
    Ok(Report { config: serde_json::Value::Null, aggregation, summary, sessions, timestamp: None })
}

/// Evaluates `(session_id, generated, ground truth)` triples and aggregates.
pub fn eval_corpus<'a, I>(pairs: I, aggregation: Aggregation) -> Result<Report, EvalError>
where
    I: IntoIterator<Item = (&'a str, &'a [ItemSet], &'a [Bundle])>,
{
    let mut sessions = Vec::new();
    for (id, generated, gt) in pairs {
        let (eval, _) = eval_session(generated, gt)?;
        sessions.push(SessionReport { session_id: id.into(), eval, failure: None });
    }
    aggregate(sessions, aggregation)
}
