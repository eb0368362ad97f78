//! Supervised fine-tuning samples with bundle-order permutation augmentation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chat::ChatMessage;
use crate::corpus::{Dataset, Session};
use crate::digest::seed_from;
use crate::knowledge::CompositeKnowledge;
use crate::prompting::{render_icl, render_zero_shot, serialize_labelled};

pub const DEFAULT_PERMUTATION_CAP: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    pub max_permutations: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy { enabled: true, max_permutations: DEFAULT_PERMUTATION_CAP }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        AugmentationPolicy { enabled: false, max_permutations: 1 }
    }

    /// Number of orderings produced for `n` bundles.
    pub fn count(&self, n: usize) -> usize {
        if !self.enabled || n == 0 {
            return 1;
        }
        let cap = self.max_permutations.max(1);
        factorial_capped(n, cap)
    }
}

fn factorial_capped(n: usize, cap: usize) -> usize {
    let mut f: usize = 1;
    for k in 2..=n {
        f = match f.checked_mul(k) {
            Some(v) if v <= cap => v,
            _ => return cap,
        };
    }
    f.min(cap)
}

/// Orderings of `n` bundles as index permutations; the identity comes first.
/// All `n!` orderings (lexicographic) when they fit under the cap, otherwise
/// `cap` distinct orderings sampled with a PRNG seeded by `seed`.
pub fn permute_bundles(n: usize, policy: &AugmentationPolicy, seed: u64) -> Vec<Vec<usize>> {
    let identity: Vec<usize> = (0..n).collect();
    let want = policy.count(n);
    if want == 1 {
        return alloc::vec![identity];
    }
    if factorial_capped(n, usize::MAX) <= want {
        let mut out = Vec::with_capacity(want);
        let mut current = identity;
        loop {
            out.push(current.clone());
            if !next_permutation(&mut current) {
                break;
            }
        }
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    seen.insert(identity.clone());
    let mut out = alloc::vec![identity.clone()];
    while out.len() < want {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let Some(i) = (0..v.len() - 1).rev().find(|&i| v[i] < v[i + 1]) else {
        return false;
    };
    let j = (i + 1..v.len()).rev().find(|&j| v[j] > v[i]).expect("successor exists");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub session_id: String,
    pub perm: usize,
}

/// One line of the exported chat JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub messages: Vec<ChatMessage>,
    pub meta: SampleMeta,
}

/// Assistant reply for one ordering. Bundles keep their original
/// `bundleK` labels so a reordering is visible in the key order.
pub fn assistant_reply(s: &Session, order: &[usize]) -> String {
    let labelled: Vec<(String, Vec<String>)> = order
        .iter()
        .map(|&k| (format!("bundle{}", k + 1), s.bundles[k].item_ids.clone()))
        .collect();
    serialize_labelled(s, &labelled)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuildOutput {
    pub samples: Vec<TrainingSample>,
    pub warnings: Vec<String>,
}

/// One sample per ordering of each session's ground-truth bundles. The user
/// message is the ICL prompt when `knowledge_for` yields knowledge for the
/// session, otherwise the zero-shot prompt.
pub fn build_samples<F, E>(
    d: &Dataset,
    mut knowledge_for: F,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<BuildOutput, E>
where
    F: FnMut(&Session) -> Result<Option<CompositeKnowledge>, E>,
{
    let mut out = BuildOutput::default();
    for s in &d.sessions {
        if s.bundles.is_empty() {
            out.warnings.push(format!("session {} has no ground-truth bundles, skipped", s.id));
            continue;
        }
        let prompt = match knowledge_for(s)? {
            Some(k) => render_icl(s, &k),
            None => render_zero_shot(s),
        };
        out.warnings.extend(prompt.warnings.iter().cloned());
        let session_seed = seed_from(format!("{seed}:{}", s.id).as_bytes());
        for (perm, order) in permute_bundles(s.bundles.len(), policy, session_seed).iter().enumerate() {
            let mut messages = prompt.messages.clone();
            messages.push(ChatMessage::assistant(assistant_reply(s, order)));
            out.samples.push(TrainingSample {
                messages,
                meta: SampleMeta { session_id: s.id.clone(), perm },
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::*;
    use crate::corpus::{Bundle, Domain};
    use crate::evaluator::ItemSet;
    use crate::prompting::parse_bundle_json;
    use crate::chat::Role;
    use alloc::vec;
    use core::convert::Infallible;

    fn session_with_bundles(id: &str, n: usize) -> Session {
        let items: Vec<(String, String)> = (0..2 * n.max(1)).map(|k| (format!("{id}-i{k}"), format!("c{k}"))).collect();
        let refs: Vec<(&str, &str)> = items.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let bundles = (0..n).map(|k| bundle(&format!("b{k}"), &[refs[2 * k].0, refs[2 * k + 1].0])).collect();
        session(id, &refs, bundles)
    }

    #[test]
    fn permutation_counts() {
        let p = AugmentationPolicy::default();
        assert_eq!(permute_bundles(2, &p, 0), vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(permute_bundles(1, &p, 0), vec![vec![0]]);
        let five = permute_bundles(5, &p, 9);
        assert_eq!(five.len(), 24);
        assert_eq!(five[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(five.iter().collect::<BTreeSet<_>>().len(), 24);
        assert_eq!(permute_bundles(4, &p, 0).len(), 24);
        assert_eq!(permute_bundles(3, &AugmentationPolicy::disabled(), 0).len(), 1);
        assert_eq!(permute_bundles(5, &p, 9), five);
    }

    #[test]
    fn sample_count_and_reparse() {
        let sessions: Vec<Session> = (0..10).map(|k| session_with_bundles(&format!("s{k}"), 1 + k % 3)).collect();
        let d = Dataset::new(Domain::Food, sessions).unwrap();
        let p = AugmentationPolicy::default();
        let out = build_samples(&d, |_| Ok::<_, Infallible>(None), &p, 1).unwrap();
        // bundle counts 1,2,3,1,2,3,1,2,3,1 -> 1!+2!+3! three times plus 1
        assert_eq!(out.samples.len(), 3 * (1 + 2 + 6) + 1);
        for sample in &out.samples {
            let s = d.session(&sample.meta.session_id).unwrap();
            assert_eq!(sample.messages[0].role, Role::User);
            assert_eq!(sample.messages[0].content, render_zero_shot(s).text());
            let parsed = parse_bundle_json(&sample.messages[1].content, s).unwrap();
            let got: BTreeSet<ItemSet> = parsed.bundles.into_iter().collect();
            let want: BTreeSet<ItemSet> = s.bundles.iter().map(Bundle::item_set).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn reordered_reply_keeps_labels() {
        let s = session_with_bundles("s", 2);
        assert_eq!(
            assistant_reply(&s, &[1, 0]),
            "{\"bundle2\": [\"product3\", \"product4\"], \"bundle1\": [\"product1\", \"product2\"]}"
        );
    }

    #[test]
    fn sessions_without_bundles_are_skipped() {
        let mut s = session_with_bundles("s", 1);
        s.bundles.clear();
        let d = Dataset::new(Domain::Food, vec![s]).unwrap();
        let out = build_samples(&d, |_| Ok::<_, Infallible>(None), &AugmentationPolicy::default(), 0).unwrap();
        assert!(out.samples.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }
}
