//! Pipeline stages shared by the CLI verbs and the experiment grid.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use bundlekd_core::corpus::CorpusError;
use bundlekd_core::distiller::{distill_rules, distill_thoughts, DistillationTrace};
use bundlekd_core::evaluator::{aggregate, eval_session, EvalError, ItemSet, SessionReport};
use bundlekd_core::knowledge::KnowledgeError;
use bundlekd_core::pattern::PatternError;
use bundlekd_core::prompting::{parse_bundle_json, render_icl, render_zero_shot};
use bundlekd_core::retrieval::RetrievalError;
use bundlekd_core::sampler::SampleError;
use bundlekd_core::sft::{build_samples, AugmentationPolicy, TrainingSample};
use bundlekd_core::{
    Aggregation, CompositeKnowledge, Dataset, Domain, KnowledgeEntry, KnowledgeFormat, Report, Session,
    SessionEval, SessionIndex,
};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSetupError, SessionVectors};
use crate::gateway::{GatewayError, Model};
use crate::io::{write_json, write_jsonl, IoError};
use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingSetupError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} read {count} test-split sessions")]
    Leakage { stage: String, count: usize },
}

/// Applies `f` to every item with up to `workers` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(k) else { break };
                let r = f(item);
                slots.lock().unwrap_or_else(|e| e.into_inner())[k] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap_or_else(|e| e.into_inner()).into_iter().map(|r| r.expect("every slot filled")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub session_id: String,
    pub error: String,
}

/// Teacher zero-shot recall per session, the difficulty signal for sampling.
pub fn teacher_recall(
    sessions: &[Session],
    teacher: &Model<'_>,
    workers: usize,
) -> (BTreeMap<String, f64>, Vec<Failure>) {
    let results = parallel_map(sessions, workers, |s| {
        let reply = teacher.complete(&render_zero_shot(s).messages).map_err(|e| e.to_string())?;
        let generated = parse_bundle_json(&reply.content, s).map(|p| p.bundles).unwrap_or_default();
        let (eval, _) = eval_session(&generated, &s.bundles).map_err(|e| e.to_string())?;
        Ok::<f64, String>(eval.recall)
    });
    let mut recall = BTreeMap::new();
    let mut failures = Vec::new();
    for (s, r) in sessions.iter().zip(results) {
        match r {
            Ok(v) => {
                recall.insert(s.id.clone(), v);
            }
            Err(error) => {
                // An unreachable teacher scores like a teacher that found nothing.
                recall.insert(s.id.clone(), 0.0);
                failures.push(Failure { stage: "teacher_eval".into(), session_id: s.id.clone(), error });
            }
        }
    }
    (recall, failures)
}

#[derive(Debug, Default)]
pub struct DistillOutcome {
    /// Entries in session-id order, before deduplication.
    pub entries: Vec<KnowledgeEntry>,
    pub failures: Vec<Failure>,
    pub warnings: Vec<String>,
}

/// Runs the rule or thought chain on every session, writing one trace file
/// per session under `trace_dir` when given. Failed sessions are recorded
/// and skipped.
pub fn distill_sessions(
    sessions: &[Session],
    domain: &Domain,
    format: KnowledgeFormat,
    teacher: &Model<'_>,
    workers: usize,
    trace_dir: Option<&Path>,
) -> Result<DistillOutcome, RunError> {
    if format == KnowledgeFormat::Pattern {
        return Err(RunError::Config("patterns are mined, not distilled".into()));
    }
    let mut ordered: Vec<&Session> = sessions.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    type Item = Result<(Vec<KnowledgeEntry>, DistillationTrace), String>;
    let results: Vec<Item> = parallel_map(&ordered, workers, |s| match format {
        KnowledgeFormat::Rule => distill_rules(s, domain.clone(), teacher)
            .map(|d| (d.knowledge.into_iter().map(KnowledgeEntry::Rule).collect(), d.trace))
            .map_err(|e| e.to_string()),
        _ => distill_thoughts(s, domain.clone(), teacher)
            .map(|d| (d.knowledge.into_iter().map(KnowledgeEntry::Thought).collect(), d.trace))
            .map_err(|e| e.to_string()),
    });
    let mut out = DistillOutcome::default();
    for (s, r) in ordered.iter().zip(results) {
        match r {
            Ok((entries, trace)) => {
                out.warnings.extend(trace.warnings.iter().map(|w| format!("{}: {w}", s.id)));
                if let Some(dir) = trace_dir {
                    write_json(&dir.join(format!("{}.{format}.json", file_safe(&s.id))), &trace)?;
                }
                out.entries.extend(entries);
            }
            Err(error) => out.failures.push(Failure { stage: format!("distill_{format}"), session_id: s.id.clone(), error }),
        }
    }
    Ok(out)
}

/// Session ids are free text; keep file names portable.
pub fn file_safe(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub session_id: String,
    pub bundles: Vec<Vec<String>>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Prediction {
    pub fn item_sets(&self) -> Vec<ItemSet> {
        self.bundles.iter().map(|b| b.iter().cloned().collect()).collect()
    }
}

/// Where ICL knowledge for a target session comes from.
pub struct KnowledgeSource<'a> {
    pub knowledge: &'a CompositeKnowledge,
    /// Required when the composite holds rules or thoughts.
    pub index: Option<&'a SessionIndex>,
    pub vectors: &'a SessionVectors,
}

impl KnowledgeSource<'_> {
    pub fn needs_index(&self) -> bool {
        self.knowledge.sections.iter().any(|s| s.format != KnowledgeFormat::Pattern)
    }

    pub fn for_session(&self, s: &Session) -> Result<CompositeKnowledge, RunError> {
        let vector = if self.needs_index() { Some(self.vectors.vector(s)?) } else { None };
        Ok(self.knowledge.retrieve_for_session(s, vector.as_ref(), self.index)?)
    }
}

/// Per-session ICL knowledge for `sessions`; a failed lookup is kept as its error text.
pub fn retrieve_all(
    sessions: &[Session],
    source: &KnowledgeSource<'_>,
    workers: usize,
) -> Vec<Result<CompositeKnowledge, String>> {
    parallel_map(sessions, workers, |s| source.for_session(s).map_err(|e| e.to_string()))
}

/// Prompts the student for every session, with the ICL prompt when
/// `knowledge` (aligned with `sessions`) is given. Any per-session error
/// becomes a recorded failure with no bundles.
pub fn generate(
    sessions: &[Session],
    knowledge: Option<&[Result<CompositeKnowledge, String>]>,
    student: &Model<'_>,
    workers: usize,
) -> Vec<Prediction> {
    let indexed: Vec<(usize, &Session)> = sessions.iter().enumerate().collect();
    parallel_map(&indexed, workers, |&(k, s)| {
        let mut warnings = Vec::new();
        let mut attempt = || -> Result<Vec<ItemSet>, String> {
            let prompt = match knowledge {
                Some(all) => render_icl(s, all[k].as_ref().map_err(|e| format!("retrieval: {e}"))?),
                None => render_zero_shot(s),
            };
            warnings.extend(prompt.warnings.iter().cloned());
            let reply = student.complete(&prompt.messages).map_err(|e| e.to_string())?;
            let parsed = parse_bundle_json(&reply.content, s).map_err(|e| e.to_string())?;
            warnings.extend(parsed.warnings);
            Ok(parsed.bundles)
        };
        let result = attempt();
        let (bundles, failure) = match result {
            Ok(b) => (b.into_iter().map(|set| set.into_iter().collect()).collect(), None),
            Err(e) => (Vec::new(), Some(e)),
        };
        Prediction { session_id: s.id.clone(), bundles, warnings, failure }
    })
}

/// Scores predictions against the dataset's ground truth. Sessions without
/// a prediction, or whose prediction failed, score as empty generation.
/// Sessions with no ground-truth bundles are left out.
pub fn evaluate_predictions(
    d: &Dataset,
    predictions: &[Prediction],
    aggregation: Aggregation,
) -> Result<Report, RunError> {
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.session_id.as_str(), p)).collect();
    let mut rows = Vec::new();
    for s in &d.sessions {
        if s.bundles.is_empty() {
            log::warn!("session {} has no ground-truth bundles; not scored", s.id);
            continue;
        }
        let (eval, failure) = match by_id.get(s.id.as_str()) {
            Some(p) => (eval_session(&p.item_sets(), &s.bundles)?.0, p.failure.clone()),
            None => (SessionEval::empty(s.bundles.len()), Some("no prediction".into())),
        };
        rows.push(SessionReport { session_id: s.id.clone(), eval, failure });
    }
    Ok(aggregate(rows, aggregation)?)
}

pub fn write_report(dir: &Path, report: &Report) -> Result<(), RunError> {
    write_json(&dir.join("report.json"), report)?;
    crate::io::write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(())
}

/// SFT samples whose prompts carry knowledge retrieved exactly as at inference.
pub fn export_sft(
    d: &Dataset,
    knowledge: Option<&KnowledgeSource<'_>>,
    policy: &AugmentationPolicy,
    seed: u64,
    out: &Path,
) -> Result<(Vec<TrainingSample>, Vec<String>), RunError> {
    let built = build_samples(d, |s| knowledge.map(|k| k.for_session(s)).transpose(), policy, seed)?;
    write_jsonl(out, &built.samples)?;
    Ok((built.samples, built.warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..50).collect();
        assert_eq!(parallel_map(&items, 8, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&[] as &[usize], 4, |x| *x).is_empty());
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(file_safe("a/b c.d"), "a_b_c.d");
    }
}
