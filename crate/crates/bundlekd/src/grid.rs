//! Experiment configuration and the RQ1/RQ2/RQ3 grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use bundlekd_core::corpus::split_dataset;
use bundlekd_core::digest::sha256_hex;
use bundlekd_core::knowledge::{KnowledgeError, Provenance, DEFAULT_DEDUP_THRESHOLD};
use bundlekd_core::pattern::{bundles_to_transactions, mine_frequent_patterns, DEFAULT_MIN_SUPPORT};
use bundlekd_core::sampler::{sample, DEFAULT_RATIOS};
use bundlekd_core::sft::AugmentationPolicy;
use bundlekd_core::{
    Aggregation, CompositeKnowledge, Dataset, Domain, KnowledgeBase, KnowledgeFormat, KnowledgeKey, Report,
    SamplingSpec, SplitSpec, Strategy,
};
use serde::{Deserialize, Serialize};

use crate::embedding::{build_embedder, save_index, EmbedderConfig, SessionVectors, SharedEmbedder};
use crate::gateway::{build_provider, CachedProvider, ChatProvider, Model, ProviderConfig};
use crate::io::{file_hash, load_dataset, read_json, session_hashes, write_atomic, write_json, write_jsonl};
use crate::manifest::{CacheStats, RunManifest, RunStatus, StageTimer};
use crate::pipeline::{
    distill_sessions, evaluate_predictions, export_sft, generate, retrieve_all, teacher_recall, write_report,
    KnowledgeSource, RunError,
};
use crate::store;

/// A set of knowledge formats; the empty set is the raw-data (zero-shot) row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KnowledgeChoice(Vec<KnowledgeFormat>);

impl KnowledgeChoice {
    pub fn raw() -> Self {
        KnowledgeChoice(Vec::new())
    }

    pub fn new(formats: &[KnowledgeFormat]) -> Result<Self, KnowledgeError> {
        let mut seen = BTreeSet::new();
        for f in formats {
            if !seen.insert(*f) {
                return Err(KnowledgeError::DuplicateFormat(*f));
            }
        }
        Ok(KnowledgeChoice(seen.into_iter().collect()))
    }

    pub fn formats(&self) -> &[KnowledgeFormat] {
        &self.0
    }

    pub fn is_raw(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromStr for KnowledgeChoice {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" | "none" => Ok(Self::raw()),
            "all" => Self::new(&KnowledgeFormat::ALL),
            list => {
                let formats = list.split(['+', ',']).map(str::parse).collect::<Result<Vec<_>, _>>()?;
                Self::new(&formats)
            }
        }
    }
}

impl fmt::Display for KnowledgeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("raw");
        }
        let names: Vec<&str> = self.0.iter().map(|k| k.as_str()).collect();
        f.write_str(&names.join("+"))
    }
}

impl TryFrom<String> for KnowledgeChoice {
    type Error = KnowledgeError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<KnowledgeChoice> for String {
    fn from(k: KnowledgeChoice) -> String {
        k.to_string()
    }
}

/// How knowledge reaches the student in an RQ1 cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Icl,
    /// Export fine-tuning data built with the knowledge, then query the
    /// fine-tuned student with the same prompt shape.
    SftExport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rq {
    Rq1,
    Rq2,
    Rq3,
}

impl Rq {
    pub fn as_str(self) -> &'static str {
        match self {
            Rq::Rq1 => "rq1",
            Rq::Rq2 => "rq2",
            Rq::Rq3 => "rq3",
        }
    }
}

impl FromStr for Rq {
    type Err = RunError;
    fn from_str(s: &str) -> Result<Self, RunError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rq1" | "1" => Ok(Rq::Rq1),
            "rq2" | "2" => Ok(Rq::Rq2),
            "rq3" | "3" => Ok(Rq::Rq3),
            other => Err(RunError::Config(format!("unknown grid {other:?}; expected rq1, rq2 or rq3"))),
        }
    }
}

fn default_formats() -> Vec<KnowledgeChoice> {
    let mut v = vec![KnowledgeChoice::raw()];
    v.extend(KnowledgeFormat::ALL.iter().map(|f| KnowledgeChoice(vec![*f])));
    v
}
fn default_modes() -> Vec<Mode> {
    vec![Mode::Icl]
}
fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}
fn default_ratios() -> Vec<f64> {
    DEFAULT_RATIOS.to_vec()
}
fn default_min_support() -> usize {
    DEFAULT_MIN_SUPPORT
}
fn default_threshold() -> f64 {
    DEFAULT_DEDUP_THRESHOLD
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Dataset file per domain.
    pub datasets: BTreeMap<Domain, PathBuf>,
    /// Domain whose test split is evaluated; defaults to the only dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_domain: Option<Domain>,
    #[serde(default)]
    pub split: SplitSpec,
    pub teacher: ProviderConfig,
    pub student: ProviderConfig,
    /// Endpoint serving the fine-tuned student, used by SFT cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft_student: Option<ProviderConfig>,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default = "default_formats")]
    pub formats: Vec<KnowledgeChoice>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Sampling used outside RQ2; all training sessions by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingSpec>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// Knowledge-source domain sets for RQ2; defaults to the target alone.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knowledge_domains: Vec<Vec<Domain>>,
    /// Fine-tuning knowledge for RQ3; defaults to `formats`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sft_formats: Vec<KnowledgeChoice>,
    #[serde(default = "default_min_support")]
    pub min_support: usize,
    #[serde(default = "default_threshold")]
    pub dedup_threshold: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Response cache; `<output_dir>/cache` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let mut cfg: ExperimentConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.datasets.values_mut().for_each(fix);
        fix(&mut self.output_dir);
        for p in [&mut self.cache_dir, &mut self.embedder.vectors].into_iter().flatten() {
            fix(p);
        }
        for provider in [Some(&mut self.teacher), Some(&mut self.student), self.sft_student.as_mut()].into_iter().flatten() {
            for p in [&mut provider.cache_dir, &mut provider.mock_script].into_iter().flatten() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.datasets.is_empty() {
            return bad("no datasets configured".into());
        }
        let target = self.target()?;
        for domains in &self.knowledge_domains {
            if domains.is_empty() {
                return bad("empty knowledge_domains entry".into());
            }
            if let Some(d) = domains.iter().find(|d| !self.datasets.contains_key(d)) {
                return bad(format!("knowledge domain {d} has no dataset"));
            }
        }
        if !self.datasets.contains_key(&target) {
            return bad(format!("target domain {target} has no dataset"));
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return bad(format!("sampling ratios must lie in (0, 1]: {:?}", self.ratios));
        }
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            return bad(format!("dedup_threshold {} not in [0, 1]", self.dedup_threshold));
        }
        if self.min_support == 0 {
            return bad("min_support must be >= 1".into());
        }
        self.split.validate()?;
        for p in [&self.teacher, &self.student].into_iter().chain(self.sft_student.as_ref()) {
            p.validate()?;
        }
        Ok(())
    }

    pub fn target(&self) -> Result<Domain, RunError> {
        match (&self.target_domain, self.datasets.len()) {
            (Some(d), _) => Ok(d.clone()),
            (None, 1) => Ok(self.datasets.keys().next().expect("one dataset").clone()),
            (None, _) => Err(RunError::Config("target_domain is required with several datasets".into())),
        }
    }

    pub fn base_sampling(&self) -> SamplingSpec {
        self.sampling.clone().unwrap_or_else(|| SamplingSpec::new(Strategy::Random, 1.0, self.seed))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

/// One grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub rq: Rq,
    pub id: String,
    pub sampling: SamplingSpec,
    pub domains: Vec<Domain>,
    /// Knowledge in the inference prompt.
    pub icl: KnowledgeChoice,
    /// Knowledge in the exported fine-tuning prompts; `None` for pure ICL.
    pub sft: Option<KnowledgeChoice>,
}

impl CellSpec {
    pub fn formats(&self) -> BTreeSet<KnowledgeFormat> {
        self.icl.formats().iter().chain(self.sft.iter().flat_map(|k| k.formats())).copied().collect()
    }
}

fn domains_label(domains: &[Domain]) -> String {
    domains.iter().map(Domain::as_str).collect::<Vec<_>>().join("+")
}

/// Cells of a grid, in summary-table order.
pub fn plan(cfg: &ExperimentConfig, rq: Rq) -> Result<Vec<CellSpec>, RunError> {
    let target = cfg.target()?;
    let base = cfg.base_sampling();
    let mut cells = Vec::new();
    match rq {
        Rq::Rq1 => {
            for f in &cfg.formats {
                for mode in &cfg.modes {
                    let (id, sft) = match mode {
                        Mode::Icl => (format!("icl-{f}"), None),
                        Mode::SftExport => (format!("sft-{f}"), Some(f.clone())),
                    };
                    cells.push(CellSpec { rq, id, sampling: base.clone(), domains: vec![target.clone()], icl: f.clone(), sft });
                }
            }
        }
        Rq::Rq2 => {
            let domain_sets = if cfg.knowledge_domains.is_empty() { vec![vec![target.clone()]] } else { cfg.knowledge_domains.clone() };
            for strategy in &cfg.strategies {
                for ratio in &cfg.ratios {
                    for f in cfg.formats.iter().filter(|f| !f.is_raw()) {
                        for domains in &domain_sets {
                            let mut sampling = base.clone();
                            sampling.strategy = *strategy;
                            sampling.ratio = *ratio;
                            let id = format!("{strategy}-r{ratio}-{f}-{}", domains_label(domains));
                            cells.push(CellSpec { rq, id, sampling, domains: domains.clone(), icl: f.clone(), sft: None });
                        }
                    }
                }
            }
        }
        Rq::Rq3 => {
            let sft_formats = if cfg.sft_formats.is_empty() { &cfg.formats } else { &cfg.sft_formats };
            for icl in &cfg.formats {
                for sft in sft_formats {
                    cells.push(CellSpec {
                        rq,
                        id: format!("icl-{icl}_sft-{sft}"),
                        sampling: base.clone(),
                        domains: vec![target.clone()],
                        icl: icl.clone(),
                        sft: Some(sft.clone()),
                    });
                }
            }
        }
    }
    let mut ids = BTreeSet::new();
    if let Some(dup) = cells.iter().find(|c| !ids.insert(c.id.clone())) {
        return Err(RunError::Config(format!("grid has duplicate cell {}", dup.id)));
    }
    Ok(cells)
}

/// Models and embedders the grid talks to. Providers are given uncached;
/// the grid adds the response cache itself.
#[derive(Clone)]
pub struct Services {
    pub teacher: Arc<dyn ChatProvider>,
    pub student: Arc<dyn ChatProvider>,
    pub sft_student: Option<Arc<dyn ChatProvider>>,
    pub text_embedder: SharedEmbedder,
    pub vectors: SessionVectors,
}

impl Services {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        let uncached = |p: &ProviderConfig| build_provider(&ProviderConfig { cache_dir: None, ..p.clone() });
        let (text_embedder, vectors) = build_embedder(&cfg.embedder)?;
        Ok(Services {
            teacher: uncached(&cfg.teacher)?,
            student: uncached(&cfg.student)?,
            sft_student: cfg.sft_student.as_ref().map(uncached).transpose()?,
            text_embedder,
            vectors,
        })
    }
}

/// Datasets and their splits, loaded once per grid.
pub struct Corpora {
    pub domains: BTreeMap<Domain, LoadedDomain>,
}

pub struct LoadedDomain {
    pub path: PathBuf,
    pub hash: String,
    pub train: Dataset,
    pub test: Dataset,
}

impl Corpora {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        let mut domains = BTreeMap::new();
        for (domain, path) in &cfg.datasets {
            let d = load_dataset(path, domain.clone())?;
            let split = split_dataset(&d, &cfg.split)?;
            domains.insert(
                domain.clone(),
                LoadedDomain { path: path.clone(), hash: file_hash(path)?, train: split.train, test: split.test },
            );
        }
        Ok(Corpora { domains })
    }

    fn get(&self, d: &Domain) -> Result<&LoadedDomain, RunError> {
        self.domains.get(d).ok_or_else(|| RunError::Config(format!("no dataset for domain {d}")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Rerun cells that already have a complete manifest.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub spec: CellSpec,
    pub dir: PathBuf,
    pub skipped: bool,
    pub report: Report,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<CellOutcome>,
    pub summary: PathBuf,
}

pub fn run_grid(cfg: &ExperimentConfig, rq: Rq, services: &Services, opts: &GridOptions) -> Result<GridOutcome, RunError> {
    cfg.validate()?;
    let cells = plan(cfg, rq)?;
    let corpora = Corpora::load(cfg)?;
    let root = cfg.output_dir.join(rq.as_str());
    let mut outcomes = Vec::new();
    for spec in cells {
        let dir = root.join(&spec.id);
        if !opts.force {
            if let Ok(m) = RunManifest::load(&dir) {
                if m.status == RunStatus::Complete {
                    log::info!("{}: complete, skipping", spec.id);
                    let report: Report = read_json(&dir.join("report.json"))?;
                    outcomes.push(CellOutcome { spec, dir, skipped: true, report, manifest: m });
                    continue;
                }
            }
        }
        log::info!("{}: running", spec.id);
        let (report, manifest) = run_cell(cfg, &spec, services, &corpora, &dir)?;
        outcomes.push(CellOutcome { spec, dir, skipped: false, report, manifest });
    }
    let summary = root.join("summary.csv");
    write_atomic(&summary, summary_csv(&outcomes).as_bytes())?;
    Ok(GridOutcome { cells: outcomes, summary })
}

pub fn summary_csv(cells: &[CellOutcome]) -> String {
    let mut out = String::from(
        "rq,cell,strategy,ratio,domains,icl,sft,precision,recall,coverage,sessions,failures,patterns,rules,thoughts\n",
    );
    for c in cells {
        let counts = |f: KnowledgeFormat| {
            c.manifest
                .stages
                .iter()
                .find(|s| s.name == "accumulate")
                .and_then(|s| s.detail.get(f.as_str()))
                .and_then(serde_json::Value::as_u64)
                .map(|n| n.to_string())
                .unwrap_or_default()
        };
        let failures = c.report.sessions.iter().filter(|s| s.failure.is_some()).count();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.spec.rq.as_str(),
            c.spec.id,
            c.spec.sampling.strategy,
            c.spec.sampling.ratio,
            domains_label(&c.spec.domains),
            c.spec.icl,
            c.spec.sft.as_ref().map(ToString::to_string).unwrap_or_default(),
            c.report.summary.precision,
            c.report.summary.recall,
            c.report.summary.coverage,
            c.report.sessions.len(),
            failures,
            counts(KnowledgeFormat::Pattern),
            counts(KnowledgeFormat::Rule),
            counts(KnowledgeFormat::Thought),
        ));
    }
    out
}

struct CellContext<'a> {
    cfg: &'a ExperimentConfig,
    spec: &'a CellSpec,
    services: &'a Services,
    dir: &'a Path,
    teacher: Model<'a>,
}

/// Runs one cell end to end: sample, mine and distill on training splits,
/// index, optionally export fine-tuning data, generate on the target test
/// split, and evaluate. The manifest is written first and finalized last.
pub fn run_cell(
    cfg: &ExperimentConfig,
    spec: &CellSpec,
    services: &Services,
    corpora: &Corpora,
    dir: &Path,
) -> Result<(Report, RunManifest), RunError> {
    let target = cfg.target()?;
    let cache = cfg.cache_dir();
    let teacher = CachedProvider::new(services.teacher.clone(), &cache);
    let student = CachedProvider::new(
        match (&spec.sft, &services.sft_student) {
            (Some(_), Some(s)) => s.clone(),
            _ => services.student.clone(),
        },
        &cache,
    );
    let student_cfg = match (&spec.sft, &cfg.sft_student) {
        (Some(_), Some(c)) => c,
        _ => &cfg.student,
    };

    let snapshot = serde_json::json!({ "cell": spec, "experiment": cfg });
    let mut manifest = RunManifest::new("cell", &spec.id, snapshot.clone());
    for (d, loaded) in &corpora.domains {
        manifest.inputs.insert(format!("dataset:{d}"), loaded.hash.clone());
        manifest.test_session_hashes.extend(session_hashes(&loaded.test.sessions));
    }
    if spec.sft.is_some() && cfg.sft_student.is_none() {
        manifest.notes.push("no sft_student configured; generation used the base student".into());
    }
    manifest.write(dir)?;

    let ctx = CellContext { cfg, spec, services, dir, teacher: Model { provider: &teacher, cfg: &cfg.teacher } };
    let result = run_cell_stages(&ctx, corpora, &target, &Model { provider: &student, cfg: student_cfg }, &mut manifest);
    manifest.cache.insert("teacher".into(), CacheStats { hits: teacher.hits(), misses: teacher.misses() });
    manifest.cache.insert("student".into(), CacheStats { hits: student.hits(), misses: student.misses() });
    let checked = result.and_then(|report| manifest.check_leakage().map(|()| report));
    match checked {
        Ok(mut report) => {
            report.config = snapshot;
            report.timestamp = Some(crate::manifest::now());
            write_report(dir, &report)?;
            manifest.add_output("report.json", &dir.join("report.json"))?;
            manifest.finish(RunStatus::Complete);
            manifest.write(dir)?;
            Ok((report, manifest))
        }
        Err(e) => {
            manifest.notes.push(format!("failed: {e}"));
            manifest.finish(RunStatus::Failed);
            manifest.write(dir)?;
            Err(e)
        }
    }
}

fn run_cell_stages(
    ctx: &CellContext<'_>,
    corpora: &Corpora,
    target: &Domain,
    student: &Model<'_>,
    manifest: &mut RunManifest,
) -> Result<Report, RunError> {
    let (cfg, spec, dir) = (ctx.cfg, ctx.spec, ctx.dir);
    let formats = spec.formats();
    let mut kb = KnowledgeBase::new();
    let mut sources = Vec::new();
    if !formats.is_empty() {
        for domain in &spec.domains {
            sources.extend(build_domain_knowledge(ctx, corpora.get(domain)?, domain, &formats, &mut kb, manifest)?);
        }
        store::persist(&kb, &dir.join("knowledge"))?;
    }

    let compose = |choice: &KnowledgeChoice| -> Result<Option<CompositeKnowledge>, RunError> {
        if choice.is_raw() {
            return Ok(None);
        }
        Ok(Some(kb.accumulate(&spec.domains, choice.formats(), ctx.services.text_embedder.as_ref(), cfg.dedup_threshold)?))
    };
    let mut timer = StageTimer::start("accumulate");
    let icl = compose(&spec.icl)?;
    let sft = spec.sft.as_ref().map(compose).transpose()?.flatten();
    for k in icl.iter().chain(sft.iter()) {
        for section in &k.sections {
            timer.note(section.format.as_str(), section.entries.len());
        }
    }
    timer.done(manifest);

    let needs_index = formats.iter().any(|f| *f != KnowledgeFormat::Pattern);
    let index = if needs_index {
        let mut timer = StageTimer::start("index");
        timer.session_hashes = session_hashes(sources.iter());
        let index = ctx.services.vectors.index(sources.iter())?;
        save_index(&dir.join("index.jsonl"), &index)?;
        timer.note("sessions", index.len());
        timer.done(manifest);
        Some(index)
    } else {
        manifest.skip("index", "no rule or thought knowledge");
        None
    };
    let vectors = &ctx.services.vectors;
    let index_ref = index.as_ref();
    let source = |k| KnowledgeSource { knowledge: k, index: index_ref, vectors };
    let loaded = corpora.get(target)?;

    if spec.sft.is_some() {
        let mut timer = StageTimer::start("export_sft");
        timer.session_hashes = session_hashes(&loaded.train.sessions);
        let src = sft.as_ref().map(|k| source(k));
        let path = dir.join("sft.jsonl");
        let (samples, warnings) = export_sft(&loaded.train, src.as_ref(), &cfg.augmentation, cfg.seed, &path)?;
        timer.note("samples", samples.len());
        timer.note("warnings", warnings.len());
        timer.done(manifest);
        manifest.add_output("sft.jsonl", &path)?;
    } else {
        manifest.skip("export_sft", "icl cell");
    }

    let workers = student.cfg.max_concurrency;
    let retrieved = match &icl {
        Some(k) => {
            let mut timer = StageTimer::start("retrieve");
            timer.session_hashes = session_hashes(&loaded.test.sessions);
            let r = retrieve_all(&loaded.test.sessions, &source(k), workers);
            timer.note("failures", r.iter().filter(|x| x.is_err()).count());
            timer.done(manifest);
            Some(r)
        }
        None => {
            manifest.skip("retrieve", "zero-shot prompt");
            None
        }
    };

    let mut timer = StageTimer::start("generate");
    timer.session_hashes = session_hashes(&loaded.test.sessions);
    let predictions = generate(&loaded.test.sessions, retrieved.as_deref(), student, workers);
    for p in predictions.iter().filter(|p| p.failure.is_some()) {
        manifest.failures.push(crate::pipeline::Failure {
            stage: "generate".into(),
            session_id: p.session_id.clone(),
            error: p.failure.clone().unwrap_or_default(),
        });
    }
    timer.note("failures", predictions.iter().filter(|p| p.failure.is_some()).count());
    timer.done(manifest);
    let pred_path = dir.join("predictions.jsonl");
    write_jsonl(&pred_path, &predictions)?;
    manifest.add_output("predictions.jsonl", &pred_path)?;

    let mut timer = StageTimer::start("evaluate");
    timer.session_hashes = session_hashes(&loaded.test.sessions);
    let report = evaluate_predictions(&loaded.test, &predictions, cfg.aggregation)?;
    timer.done(manifest);
    Ok(report)
}

/// Samples the domain's training split and distills every format the cell
/// needs; returns the sampled sessions.
fn build_domain_knowledge(
    ctx: &CellContext<'_>,
    loaded: &LoadedDomain,
    domain: &Domain,
    formats: &BTreeSet<KnowledgeFormat>,
    kb: &mut KnowledgeBase,
    manifest: &mut RunManifest,
) -> Result<Vec<bundlekd_core::Session>, RunError> {
    let (cfg, spec, dir) = (ctx.cfg, ctx.spec, ctx.dir);
    let train = &loaded.train;
    let train_hashes = session_hashes(&train.sessions);
    let workers = cfg.teacher.max_concurrency;

    let difficulty = if spec.sampling.strategy == Strategy::Difficulty {
        let mut timer = StageTimer::start(format!("teacher_eval:{domain}"));
        timer.session_hashes = train_hashes.clone();
        let (recall, failures) = teacher_recall(&train.sessions, &ctx.teacher, workers);
        timer.note("failures", failures.len());
        timer.done(manifest);
        manifest.failures.extend(failures);
        Some(recall)
    } else {
        None
    };

    let mut timer = StageTimer::start(format!("sample:{domain}"));
    timer.session_hashes = train_hashes;
    let sampled = sample(train, &spec.sampling, difficulty.as_ref())?;
    timer.note("sampled", sampled.session_ids.len());
    timer.done(manifest);
    write_json(&dir.join(format!("sample.{domain}.json")), &sampled)?;
    let ids: BTreeSet<String> = sampled.session_ids.iter().cloned().collect();
    let subset = train.subset(&ids);
    let hashes = session_hashes(&subset.sessions);
    let provenance = Provenance { sampling: Some(spec.sampling.clone()), dataset_hash: loaded.hash.clone(), source_sessions: subset.sessions.len() };

    for format in formats {
        let key = KnowledgeKey::new(domain.clone(), *format);
        if *format == KnowledgeFormat::Pattern {
            let mut timer = StageTimer::start(format!("mine:{domain}"));
            timer.session_hashes = hashes.clone();
            let patterns = mine_frequent_patterns(&bundles_to_transactions(&subset), cfg.min_support)?;
            kb.insert_patterns(domain.clone(), &patterns, provenance.clone());
            timer.note("patterns", kb.count_distinct(&key)?);
            timer.done(manifest);
            continue;
        }
        let mut timer = StageTimer::start(format!("distill_{format}:{domain}"));
        timer.session_hashes = hashes.clone();
        let traces = dir.join("traces");
        let outcome = distill_sessions(&subset.sessions, domain, *format, &ctx.teacher, workers, Some(&traces))?;
        let raw = outcome.entries.len();
        kb.insert_text(key.clone(), outcome.entries, provenance.clone(), ctx.services.text_embedder.as_ref(), cfg.dedup_threshold)?;
        timer.note("distilled", raw);
        timer.note("kept", kb.count_distinct(&key)?);
        timer.note("failures", outcome.failures.len());
        timer.done(manifest);
        manifest.failures.extend(outcome.failures);
    }
    Ok(subset.sessions)
}

/// Content digest of a cell spec, handy for naming ad hoc runs.
pub fn spec_digest(spec: &CellSpec) -> String {
    sha256_hex(serde_json::to_string(spec).expect("spec serializes").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        serde_json::from_value(serde_json::json!({
            "datasets": {"electronic": "e.jsonl"},
            "teacher": {"kind": "mock", "model": "t"},
            "student": {"kind": "mock", "model": "s"},
        }))
        .unwrap()
    }

    #[test]
    fn choices_parse_and_print() {
        assert_eq!("raw".parse::<KnowledgeChoice>().unwrap(), KnowledgeChoice::raw());
        let c: KnowledgeChoice = "rule+pattern".parse().unwrap();
        assert_eq!(c.to_string(), "pattern+rule");
        assert_eq!("all".parse::<KnowledgeChoice>().unwrap().formats().len(), 3);
        assert!("rule+rule".parse::<KnowledgeChoice>().is_err());
        assert!("facts".parse::<KnowledgeChoice>().is_err());
    }

    #[test]
    fn cell_counts() {
        let mut c = cfg();
        assert_eq!(plan(&c, Rq::Rq1).unwrap().len(), 4);
        c.modes = vec![Mode::Icl, Mode::SftExport];
        assert_eq!(plan(&c, Rq::Rq1).unwrap().len(), 8);

        c.strategies = vec![Strategy::Random, Strategy::Length];
        c.ratios = vec![0.1, 0.3];
        c.formats = vec!["rule".parse().unwrap()];
        let cells = plan(&c, Rq::Rq2).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].id, "random-r0.3-rule-electronic");

        c.formats = default_formats();
        c.sft_formats = vec!["pattern".parse().unwrap(), "rule".parse().unwrap()];
        assert_eq!(plan(&c, Rq::Rq3).unwrap().len(), 8);
    }

    #[test]
    fn validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.ratios = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.datasets.insert(Domain::Food, "f.jsonl".into());
        assert!(c.validate().is_err(), "target is ambiguous");
        c.target_domain = Some(Domain::Food);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn relative_paths_resolve() {
        let mut c = cfg();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.datasets[&Domain::Electronic], PathBuf::from("/cfg/e.jsonl"));
        assert_eq!(c.output_dir, PathBuf::from("/cfg/runs"));
        assert_eq!(c.cache_dir(), PathBuf::from("/cfg/runs/cache"));
    }
}
