//! Category-level frequent pattern mining (Apriori) and the Freq baseline.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Session};

pub const DEFAULT_MIN_SUPPORT: usize = 2;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PatternError {
    #[error("min_support must be at least 1")]
    ZeroSupport,
}

/// Categorical view of one ground-truth bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub categories: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub categories: Vec<String>,
    pub support: usize,
}

impl Pattern {
    pub fn new<I, S>(categories: I, support: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Pattern { categories: categories.into_iter().map(Into::into).collect(), support }
    }

    pub fn category_set(&self) -> BTreeSet<String> {
        self.categories.iter().cloned().collect()
    }

    /// Same pattern with categories sorted and deduplicated.
    pub fn canonical(&self) -> Pattern {
        Pattern { categories: self.category_set().into_iter().collect(), support: self.support }
    }
}

/// Support descending, then lexicographic categories.
pub fn pattern_order(a: &Pattern, b: &Pattern) -> Ordering {
    b.support.cmp(&a.support).then_with(|| a.categories.cmp(&b.categories))
}

pub fn bundles_to_transactions(d: &Dataset) -> Vec<Transaction> {
    d.sessions.iter().flat_map(session_transactions).collect()
}

pub fn session_transactions(s: &Session) -> impl Iterator<Item = Transaction> + '_ {
    s.bundles.iter().map(move |b| Transaction {
        categories: b
            .item_ids
            .iter()
            .filter_map(|id| s.item(id))
            .map(|item| item.category.clone())
            .collect(),
    })
}

/// Level-wise Apriori. Returns every itemset of size >= 2 whose support
/// reaches `min_support`, sorted by [`pattern_order`].
pub fn mine_frequent_patterns(
    transactions: &[Transaction],
    min_support: usize,
) -> Result<Vec<Pattern>, PatternError> {
    if min_support == 0 {
        return Err(PatternError::ZeroSupport);
    }
    let vocab: Vec<&String> = transactions
        .iter()
        .flat_map(|t| t.categories.iter())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&String, u32> =
        vocab.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect();
    let encoded: Vec<Vec<u32>> = transactions
        .iter()
        .map(|t| t.categories.iter().map(|c| index[c]).collect())
        .collect();

    let mut singles = alloc::vec![0usize; vocab.len()];
    for t in &encoded {
        for &c in t {
            singles[c as usize] += 1;
        }
    }
    let mut level: Vec<Vec<u32>> = (0..vocab.len() as u32)
        .filter(|&c| singles[c as usize] >= min_support)
        .map(|c| alloc::vec![c])
        .collect();

    let mut out = Vec::new();
    while level.len() > 1 {
        let frequent: BTreeSet<&[u32]> = level.iter().map(Vec::as_slice).collect();
        let candidates = join_and_prune(&level, &frequent);
        let mut next = Vec::new();
        for cand in candidates {
            let support = encoded.iter().filter(|t| is_sorted_subset(&cand, t)).count();
            if support >= min_support {
                out.push(Pattern {
                    categories: cand.iter().map(|&c| vocab[c as usize].clone()).collect(),
                    support,
                });
                next.push(cand);
            }
        }
        level = next;
    }
    out.sort_by(pattern_order);
    Ok(out)
}

/// `level` is lexicographically sorted and all itemsets share one length.
fn join_and_prune(level: &[Vec<u32>], frequent: &BTreeSet<&[u32]>) -> Vec<Vec<u32>> {
    let k = level[0].len();
    let mut out = Vec::new();
    for (i, a) in level.iter().enumerate() {
        for b in &level[i + 1..] {
            if a[..k - 1] != b[..k - 1] {
                break;
            }
            let mut cand = a.clone();
            cand.push(b[k - 1]);
            let all_frequent = (0..cand.len()).all(|skip| {
                let sub: Vec<u32> = cand
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != skip)
                    .map(|(_, &c)| c)
                    .collect();
                frequent.contains(sub.as_slice())
            });
            if all_frequent {
                out.push(cand);
            }
        }
    }
    out
}

fn is_sorted_subset(needle: &[u32], hay: &[u32]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.by_ref().any(|h| h == n))
}

/// Merges set-equal patterns, keeping the maximum support.
pub fn dedup_patterns(patterns: &[Pattern]) -> Vec<Pattern> {
    let mut merged: BTreeMap<BTreeSet<String>, usize> = BTreeMap::new();
    for p in patterns {
        let support = merged.entry(p.category_set()).or_insert(0);
        *support = (*support).max(p.support);
    }
    let mut out: Vec<Pattern> = merged
        .into_iter()
        .map(|(cats, support)| Pattern { categories: cats.into_iter().collect(), support })
        .collect();
    out.sort_by(pattern_order);
    out
}

/// Freq baseline: one bundle per pattern whose categories all occur in the
/// session, picking the first item (session order) of each category.
pub fn freq_baseline_generate(s: &Session, patterns: &[Pattern]) -> Vec<BTreeSet<String>> {
    let session_cats = s.categories();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for p in patterns {
        let cats = p.category_set();
        if !cats.is_subset(&session_cats) {
            continue;
        }
        let bundle: BTreeSet<String> = cats
            .iter()
            .filter_map(|c| s.items.iter().find(|i| &i.category == c))
            .map(|i| i.id.clone())
            .collect();
        if bundle.len() >= 2 && seen.insert(bundle.clone()) {
            out.push(bundle);
        }
    }
    out
}
