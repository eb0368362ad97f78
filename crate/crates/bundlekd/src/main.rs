use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bundlekd::embedding::{build_embedder, load_vectors, save_index, EmbedderConfig};
use bundlekd::gateway::{build_provider, Model, ProviderConfig, ProviderKind};
use bundlekd::grid::{run_grid, ExperimentConfig, GridOptions, KnowledgeChoice, Rq, Services};
use bundlekd::io::{file_hash, load_dataset, read_json, read_jsonl, save_dataset, session_hashes, write_json, write_jsonl};
use bundlekd::manifest::{RunManifest, RunStatus, StageTimer};
use bundlekd::pipeline::{
    distill_sessions, evaluate_predictions, export_sft, generate, retrieve_all, teacher_recall, write_report,
    KnowledgeSource, Prediction, RunError,
};
use bundlekd::store::{self, CompositeFile};
use bundlekd_core::corpus::{dataset_stats, split_dataset};
use bundlekd_core::knowledge::{Provenance, DEFAULT_DEDUP_THRESHOLD};
use bundlekd_core::pattern::{bundles_to_transactions, freq_baseline_generate, mine_frequent_patterns};
use bundlekd_core::sampler::sample;
use bundlekd_core::sft::AugmentationPolicy;
use bundlekd_core::{
    Aggregation, CompositeKnowledge, Dataset, Domain, KnowledgeBase, KnowledgeFormat, KnowledgeKey, Pattern,
    Report, SamplingSpec, SessionIndex, Strategy,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bundlekd", version, about = "Knowledge distillation for bundle generation")]
struct Cli {
    /// Experiment config (JSON); supplies providers, embedder and defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base directory for relative output paths; overrides the grid output dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(flatten)]
    provider: ProviderFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ProviderFlags {
    #[arg(long, global = true, value_enum)]
    provider_kind: Option<KindArg>,
    #[arg(long, global = true)]
    provider_base_url: Option<String>,
    #[arg(long, global = true)]
    provider_model: Option<String>,
    #[arg(long, global = true)]
    provider_api_key_env: Option<String>,
    #[arg(long, global = true)]
    provider_temperature: Option<f64>,
    #[arg(long, global = true)]
    provider_concurrency: Option<usize>,
    #[arg(long, global = true)]
    provider_cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    provider_mock_script: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Openai,
    Mock,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a raw dataset and write it back normalized, optionally split 7:1:2.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        domain: Option<Domain>,
        /// Accepted for compatibility; loading always validates.
        #[arg(long)]
        validate: bool,
        /// Also write `<stem>.train|valid|test.jsonl` next to the output.
        #[arg(long)]
        split: bool,
    },
    /// Mine frequent category patterns from ground-truth bundles.
    Mine {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        sample: Option<PathBuf>,
        #[arg(long, default_value_t = bundlekd_core::pattern::DEFAULT_MIN_SUPPORT)]
        min_support: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also store the patterns as `<dir>/<domain>.pattern.json`.
        #[arg(long)]
        knowledge: Option<PathBuf>,
    },
    /// Choose the training sessions knowledge is distilled from.
    Sample {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        ratio: f64,
        /// Teacher report whose per-session recall drives difficulty sampling.
        #[arg(long)]
        teacher_eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the teacher's rule or thought chain and store the knowledge.
    Distill {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        format: KnowledgeFormat,
        #[arg(long)]
        sample: Option<PathBuf>,
        /// Teacher provider config (JSON).
        #[arg(long)]
        provider: Option<PathBuf>,
        /// Knowledge directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Embed sessions into a nearest-neighbour index file.
    Index {
        #[arg(long, required = true)]
        dataset: Vec<PathBuf>,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        sample: Option<PathBuf>,
        /// Embedder config (JSON).
        #[arg(long)]
        provider: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Knowledge store operations.
    Knowledge {
        #[command(subcommand)]
        op: KnowledgeOp,
    },
    /// Write chat-format fine-tuning samples.
    ExportSft {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        domain: Option<Domain>,
        /// Composite knowledge file, or `none` for zero-shot prompts.
        #[arg(long, default_value = "none")]
        knowledge: String,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        embedder: Option<PathBuf>,
        /// Add bundle-order permutations.
        #[arg(long)]
        augment: bool,
        #[arg(long, default_value_t = bundlekd_core::sft::DEFAULT_PERMUTATION_CAP)]
        cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask the student for bundles on every session.
    Generate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long, default_value = "none")]
        knowledge: String,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        embedder: Option<PathBuf>,
        /// Student provider config (JSON).
        #[arg(long)]
        provider: Option<PathBuf>,
        /// Run the pattern baseline instead of a model.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Pattern file for `--baseline freq`.
        #[arg(long)]
        patterns: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long, value_enum)]
        aggregation: Option<AggArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid from `--config`.
    Grid {
        #[arg(long)]
        rq: Rq,
    },
}

#[derive(Subcommand)]
enum KnowledgeOp {
    /// Compose stored knowledge across domains and formats.
    Accumulate {
        #[arg(long, default_value = "knowledge")]
        knowledge: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        domains: Vec<Domain>,
        /// Comma- or plus-separated formats.
        #[arg(long)]
        formats: KnowledgeChoice,
        #[arg(long)]
        embedder: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Macro,
    Micro,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Freq,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    config: Option<ExperimentConfig>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    force: bool,
    flags: ProviderFlags,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.out_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn seed(&self) -> u64 {
        self.seed.or(self.config.as_ref().map(|c| c.seed)).unwrap_or(0)
    }

    fn domain(&self, given: Option<Domain>) -> Result<Domain, RunError> {
        match (given, &self.config) {
            (Some(d), _) => Ok(d),
            (None, Some(cfg)) => cfg.target(),
            (None, None) => Err(RunError::Config("--domain is required without --config".into())),
        }
    }

    fn load(&self, path: &Path, domain: Option<Domain>) -> Result<Dataset, RunError> {
        Ok(load_dataset(path, self.domain(domain)?)?)
    }

    /// Provider for `role`: explicit file, else the config's entry, else a
    /// mock; `--provider-*` flags apply last.
    fn provider(&self, file: Option<&Path>, role: Role) -> Result<ProviderConfig, RunError> {
        let mut p = match (file, &self.config) {
            (Some(f), _) => read_json(f)?,
            (None, Some(cfg)) => match role {
                Role::Teacher => cfg.teacher.clone(),
                Role::Student => cfg.student.clone(),
            },
            (None, None) => ProviderConfig::mock("mock"),
        };
        let f = &self.flags;
        if let Some(k) = f.provider_kind {
            p.kind = match k {
                KindArg::Openai => ProviderKind::Openai,
                KindArg::Mock => ProviderKind::Mock,
            };
        }
        if let Some(v) = &f.provider_base_url {
            p.base_url = v.clone();
        }
        if let Some(v) = &f.provider_model {
            p.model = v.clone();
        }
        if let Some(v) = &f.provider_api_key_env {
            p.api_key_env = Some(v.clone());
        }
        if let Some(v) = f.provider_temperature {
            p.temperature = v;
        }
        if let Some(v) = f.provider_concurrency {
            p.max_concurrency = v;
        }
        if let Some(v) = &f.provider_cache_dir {
            p.cache_dir = Some(v.clone());
        }
        if let Some(v) = &f.provider_mock_script {
            p.mock_script = Some(v.clone());
        }
        if p.cache_dir.is_none() {
            p.cache_dir = self.config.as_ref().map(ExperimentConfig::cache_dir);
        }
        p.validate()?;
        Ok(p)
    }

    fn embedder(&self, file: Option<&Path>) -> Result<EmbedderConfig, RunError> {
        Ok(match (file, &self.config) {
            (Some(f), _) => read_json(f)?,
            (None, Some(cfg)) => cfg.embedder.clone(),
            (None, None) => EmbedderConfig::default(),
        })
    }

    fn threshold(&self) -> f64 {
        self.config.as_ref().map_or(DEFAULT_DEDUP_THRESHOLD, |c| c.dedup_threshold)
    }

    fn manifest(&self, kind: &str, args: serde_json::Value) -> RunManifest {
        let config = serde_json::json!({ "args": args, "experiment": self.config });
        RunManifest::new(kind, kind, config)
    }

    /// Fails when `out` exists and `--force` was not given.
    fn fresh(&self, out: &Path) -> Result<bool, RunError> {
        if out.exists() && !self.force {
            log::info!("{} exists; pass --force to recompute", out.display());
            return Ok(false);
        }
        Ok(true)
    }
}

#[derive(Clone, Copy)]
enum Role {
    Teacher,
    Student,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn sampled(d: &Dataset, sample: Option<&Path>) -> Result<Dataset, RunError> {
    match sample {
        Some(p) => {
            let s: bundlekd_core::SampleResult = read_json(p)?;
            let ids: BTreeSet<String> = s.session_ids.into_iter().collect();
            let unknown: Vec<&String> = ids.iter().filter(|id| d.session(id).is_none()).collect();
            if !unknown.is_empty() {
                return Err(RunError::Config(format!(
                    "{}: {} sampled sessions are not in the dataset, e.g. {}",
                    p.display(),
                    unknown.len(),
                    unknown[0]
                )));
            }
            Ok(d.subset(&ids))
        }
        None => Ok(d.clone()),
    }
}

fn load_knowledge(arg: &str) -> Result<Option<CompositeKnowledge>, RunError> {
    if arg.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    Ok(Some(store::load_composite(Path::new(arg))?.knowledge))
}

fn load_index(path: Option<&Path>, k: Option<&CompositeKnowledge>) -> Result<Option<SessionIndex>, RunError> {
    let needs = k.is_some_and(|k| k.sections.iter().any(|s| s.format != KnowledgeFormat::Pattern));
    match (path, needs) {
        (Some(p), true) => {
            let entries: Vec<bundlekd_core::retrieval::IndexEntry> = read_jsonl(p)?;
            let fingerprint = format!("file:{}", file_hash(p)?);
            let mut index = SessionIndex::new(fingerprint);
            for e in entries {
                index.insert(e.session_id, e.vector)?;
            }
            Ok(Some(index))
        }
        (None, true) => Err(RunError::Config("rule or thought knowledge needs --index".into())),
        (_, false) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    let config = cli.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let ctx = Ctx { config, out_dir: cli.out_dir, seed: cli.seed, force: cli.force, flags: cli.provider };
    match cli.command {
        Command::Ingest { input, out, domain, validate: _, split } => {
            let out = ctx.out(&out);
            let d = ctx.load(&input, domain)?;
            save_dataset(&out, &d)?;
            let mut m = ctx.manifest("ingest", serde_json::json!({ "input": input, "split": split }));
            m.add_input("input", &input)?;
            m.add_output("dataset", &out)?;
            log::info!("{} sessions, {:?}", d.sessions.len(), dataset_stats(&d));
            if split {
                let mut spec = ctx.config.as_ref().map(|c| c.split.clone()).unwrap_or_default();
                if let Some(seed) = ctx.seed {
                    spec.seed = seed;
                }
                let parts = split_dataset(&d, &spec)?;
                let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
                for (name, part) in [("train", &parts.train), ("valid", &parts.valid), ("test", &parts.test)] {
                    let path = out.with_file_name(format!("{stem}.{name}.jsonl"));
                    save_dataset(&path, part)?;
                    m.add_output(name, &path)?;
                    log::info!("{name}: {} sessions -> {}", part.sessions.len(), path.display());
                }
            }
            m.finish(RunStatus::Complete);
            m.write_to(&manifest_path(&out))?;
        }
        Command::Mine { dataset, domain, sample: sample_file, min_support, out, knowledge } => {
            let out = ctx.out(&out);
            let d = ctx.load(&dataset, domain)?;
            let subset = sampled(&d, sample_file.as_deref())?;
            let mut m = ctx.manifest("mine", serde_json::json!({ "min_support": min_support }));
            m.add_input("dataset", &dataset)?;
            let mut t = StageTimer::start(format!("mine:{}", d.domain));
            t.session_hashes = session_hashes(&subset.sessions);
            let patterns = mine_frequent_patterns(&bundles_to_transactions(&subset), min_support)?;
            t.note("patterns", patterns.len());
            t.done(&mut m);
            write_json(&out, &patterns)?;
            m.add_output("patterns", &out)?;
            if let Some(dir) = knowledge {
                let dir = ctx.out(&dir);
                let mut kb = existing_store(&dir)?;
                let provenance = Provenance {
                    sampling: None,
                    dataset_hash: file_hash(&dataset)?,
                    source_sessions: subset.sessions.len(),
                };
                kb.insert_patterns(d.domain.clone(), &patterns, provenance);
                store::persist(&kb, &dir)?;
            }
            log::info!("{} patterns", patterns.len());
            m.finish(RunStatus::Complete);
            m.write_to(&manifest_path(&out))?;
        }
        Command::Sample { dataset, domain, strategy, ratio, teacher_eval, out } => {
            let out = ctx.out(&out);
            let d = ctx.load(&dataset, domain)?;
            let spec = SamplingSpec::new(strategy, ratio, ctx.seed());
            let mut m = ctx.manifest("sample", serde_json::to_value(&spec).unwrap_or_default());
            m.add_input("dataset", &dataset)?;
            let difficulty = match (strategy, teacher_eval) {
                (Strategy::Difficulty, Some(p)) => {
                    let report: Report = read_json(&p)?;
                    m.add_input("teacher_eval", &p)?;
                    Some(report.sessions.iter().map(|s| (s.session_id.clone(), s.eval.recall)).collect())
                }
                (Strategy::Difficulty, None) => {
                    let cfg = ctx.provider(None, Role::Teacher)?;
                    let provider = build_provider(&cfg)?;
                    let teacher = Model { provider: provider.as_ref(), cfg: &cfg };
                    let mut t = StageTimer::start(format!("teacher_eval:{}", d.domain));
                    t.session_hashes = session_hashes(&d.sessions);
                    let (recall, failures) = teacher_recall(&d.sessions, &teacher, cfg.max_concurrency);
                    t.note("failures", failures.len());
                    t.done(&mut m);
                    m.failures.extend(failures);
                    Some(recall)
                }
                _ => None::<BTreeMap<String, f64>>,
            };
            let mut t = StageTimer::start(format!("sample:{}", d.domain));
            t.session_hashes = session_hashes(&d.sessions);
            let result = sample(&d, &spec, difficulty.as_ref())?;
            t.note("sampled", result.session_ids.len());
            t.done(&mut m);
            write_json(&out, &result)?;
            m.add_output("sample", &out)?;
            log::info!("sampled {} of {} sessions", result.session_ids.len(), d.sessions.len());
            m.finish(RunStatus::Complete);
            m.write_to(&manifest_path(&out))?;
        }
        Command::Distill { dataset, domain, format, sample: sample_file, provider, out, trace } => {
            let out = ctx.out(&out);
            let d = ctx.load(&dataset, domain)?;
            let subset = sampled(&d, sample_file.as_deref())?;
            let cfg = ctx.provider(provider.as_deref(), Role::Teacher)?;
            let chat = build_provider(&cfg)?;
            let teacher = Model { provider: chat.as_ref(), cfg: &cfg };
            let (text_embedder, _) = build_embedder(&ctx.embedder(None)?)?;
            let mut m = ctx.manifest("distill", serde_json::json!({ "format": format, "teacher": cfg }));
            m.add_input("dataset", &dataset)?;
            let mut t = StageTimer::start(format!("distill_{format}:{}", d.domain));
            t.session_hashes = session_hashes(&subset.sessions);
            let trace = trace.map(|p| ctx.out(&p));
            let outcome =
                distill_sessions(&subset.sessions, &d.domain, format, &teacher, cfg.max_concurrency, trace.as_deref())?;
            let key = KnowledgeKey::new(d.domain.clone(), format);
            let mut kb = existing_store(&out)?;
            let provenance = Provenance {
                sampling: None,
                dataset_hash: file_hash(&dataset)?,
                source_sessions: subset.sessions.len(),
            };
            let raw = outcome.entries.len();
            kb.insert_text(key.clone(), outcome.entries, provenance, text_embedder.as_ref(), ctx.threshold())?;
            t.note("distilled", raw);
            t.note("kept", kb.count_distinct(&key)?);
            t.note("failures", outcome.failures.len());
            t.done(&mut m);
            for w in &outcome.warnings {
                log::warn!("{w}");
            }
            for f in &outcome.failures {
                log::error!("{}: {}", f.session_id, f.error);
            }
            m.failures = outcome.failures;
            store::persist(&kb, &out)?;
            log::info!("{raw} entries distilled, {} kept", kb.count_distinct(&key)?);
            m.finish(RunStatus::Complete);
            m.write(&out)?;
        }
        Command::Index { dataset, domain, sample: sample_file, provider, out } => {
            let out = ctx.out(&out);
            let (_, vectors) = build_embedder(&ctx.embedder(provider.as_deref())?)?;
            let mut m = ctx.manifest("index", serde_json::json!({ "fingerprint": vectors.fingerprint() }));
            let mut sessions = Vec::new();
            for p in &dataset {
                let d = ctx.load(p, domain.clone())?;
                m.add_input(&format!("dataset:{}", p.display()), p)?;
                sessions.extend(sampled(&d, sample_file.as_deref()).unwrap_or(d).sessions);
            }
            let mut t = StageTimer::start("index");
            t.session_hashes = session_hashes(&sessions);
            let index = vectors.index(&sessions)?;
            t.note("sessions", index.len());
            t.done(&mut m);
            save_index(&out, &index)?;
            m.add_output("index", &out)?;
            m.finish(RunStatus::Complete);
            m.write_to(&manifest_path(&out))?;
        }
        Command::Knowledge { op: KnowledgeOp::Accumulate { knowledge, domains, formats, embedder, threshold, out } } => {
            let out = ctx.out(&out);
            let kb = store::load(&knowledge)?;
            let (text_embedder, _) = build_embedder(&ctx.embedder(embedder.as_deref())?)?;
            let composite = kb.accumulate(
                &domains,
                formats.formats(),
                text_embedder.as_ref(),
                threshold.unwrap_or_else(|| ctx.threshold()),
            )?;
            for s in &composite.sections {
                log::info!("{}: {} entries", s.format, s.entries.len());
            }
            store::save_composite(&out, &CompositeFile::new(domains, composite))?;
        }
        Command::ExportSft { dataset, domain, knowledge, index, embedder, augment, cap, out } => {
            let out = ctx.out(&out);
            if !ctx.fresh(&out)? {
                return Ok(());
            }
            let d = ctx.load(&dataset, domain)?;
            let composite = load_knowledge(&knowledge)?;
            let index = load_index(index.as_deref(), composite.as_ref())?;
            let vectors = match &index {
                Some(_) => index_vectors(embedder.as_deref(), &ctx)?,
                None => build_embedder(&EmbedderConfig::default())?.1,
            };
            let policy = if augment {
                AugmentationPolicy { enabled: true, max_permutations: cap }
            } else {
                AugmentationPolicy::disabled()
            };
            let mut m = ctx.manifest("export_sft", serde_json::json!({ "knowledge": knowledge, "policy": policy }));
            m.add_input("dataset", &dataset)?;
            let mut t = StageTimer::start("export_sft");
            t.session_hashes = session_hashes(&d.sessions);
            let source = composite.as_ref().map(|k| KnowledgeSource { knowledge: k, index: index.as_ref(), vectors: &vectors });
            let (samples, warnings) = export_sft(&d, source.as_ref(), &policy, ctx.seed(), &out)?;
            t.note("samples", samples.len());
            t.done(&mut m);
            for w in &warnings {
                log::warn!("{w}");
            }
            m.add_output("sft", &out)?;
            m.finish(RunStatus::Complete);
            m.write_to(&manifest_path(&out))?;
            log::info!("{} samples from {} sessions", samples.len(), d.sessions.len());
        }
        Command::Generate { dataset, domain, knowledge, index, embedder, provider, baseline, patterns, out } => {
            let out = ctx.out(&out);
            if !ctx.fresh(&out)? {
                return Ok(());
            }
            let d = ctx.load(&dataset, domain)?;
            let mut m = ctx.manifest("generate", serde_json::json!({ "knowledge": knowledge }));
            m.add_input("dataset", &dataset)?;
            m.test_session_hashes = session_hashes(&d.sessions);
            let predictions = match baseline {
                Some(Baseline::Freq) => {
                    let path = patterns.ok_or_else(|| RunError::Config("--baseline freq needs --patterns".into()))?;
                    let patterns: Vec<Pattern> = read_json(&path)?;
                    m.add_input("patterns", &path)?;
                    m.skip("retrieve", "frequency baseline");
                    let mut t = StageTimer::start("generate");
                    let preds = d
                        .sessions
                        .iter()
                        .map(|s| Prediction {
                            session_id: s.id.clone(),
                            bundles: freq_baseline_generate(s, &patterns).into_iter().map(|b| b.into_iter().collect()).collect(),
                            warnings: Vec::new(),
                            failure: None,
                        })
                        .collect::<Vec<_>>();
                    t.note("sessions", preds.len());
                    t.done(&mut m);
                    preds
                }
                None => {
                    let composite = load_knowledge(&knowledge)?;
                    let index = load_index(index.as_deref(), composite.as_ref())?;
                    let cfg = ctx.provider(provider.as_deref(), Role::Student)?;
                    let chat = build_provider(&cfg)?;
                    let student = Model { provider: chat.as_ref(), cfg: &cfg };
                    let retrieved = match &composite {
                        Some(k) => {
                            let vectors = match &index {
                                Some(_) => index_vectors(embedder.as_deref(), &ctx)?,
                                None => build_embedder(&EmbedderConfig::default())?.1,
                            };
                            let source = KnowledgeSource { knowledge: k, index: index.as_ref(), vectors: &vectors };
                            let mut t = StageTimer::start("retrieve");
                            let r = retrieve_all(&d.sessions, &source, cfg.max_concurrency);
                            t.note("failures", r.iter().filter(|x| x.is_err()).count());
                            t.done(&mut m);
                            Some(r)
                        }
                        None => {
                            m.skip("retrieve", "zero-shot prompt");
                            None
                        }
                    };
                    let mut t = StageTimer::start("generate");
                    let preds = generate(&d.sessions, retrieved.as_deref(), &student, cfg.max_concurrency);
                    t.note("failures", preds.iter().filter(|p| p.failure.is_some()).count());
                    t.done(&mut m);
                    preds
                }
            };
            for p in &predictions {
                if let Some(e) = &p.failure {
                    log::error!("{}: {e}", p.session_id);
                    m.failures.push(bundlekd::pipeline::Failure {
                        stage: "generate".into(),
                        session_id: p.session_id.clone(),
                        error: e.clone(),
                    });
                }
            }
            write_jsonl(&out, &predictions)?;
            m.add_output("predictions", &out)?;
            m.finish(RunStatus::Complete);
            m.write_to(&manifest_path(&out))?;
            log::info!("{} predictions, {} failures", predictions.len(), m.failures.len());
        }
        Command::Evaluate { predictions, dataset, domain, aggregation, out } => {
            let out = ctx.out(&out);
            let d = ctx.load(&dataset, domain)?;
            let preds: Vec<Prediction> = read_jsonl(&predictions)?;
            let aggregation = aggregation
                .map(|a| match a {
                    AggArg::Macro => Aggregation::Macro,
                    AggArg::Micro => Aggregation::Micro,
                })
                .or(ctx.config.as_ref().map(|c| c.aggregation))
                .unwrap_or_default();
            let mut report = evaluate_predictions(&d, &preds, aggregation)?;
            report.config = serde_json::json!({
                "dataset": dataset,
                "dataset_hash": file_hash(&dataset)?,
                "predictions": predictions,
                "predictions_hash": file_hash(&predictions)?,
            });
            report.timestamp = Some(bundlekd::manifest::now());
            if out.extension().is_some_and(|e| e == "json") {
                write_json(&out, &report)?;
                bundlekd::io::write_atomic(&out.with_extension("csv"), report.to_csv().as_bytes())?;
            } else {
                write_report(&out, &report)?;
            }
            let s = report.summary;
            println!("precision {:.4}  recall {:.4}  coverage {:.4}  ({} sessions)", s.precision, s.recall, s.coverage, report.sessions.len());
        }
        Command::Grid { rq } => {
            let mut cfg =
                ctx.config.clone().ok_or_else(|| RunError::Config("grid needs --config".into()))?;
            if let Some(dir) = &ctx.out_dir {
                cfg.output_dir = dir.clone();
            }
            if let Some(seed) = ctx.seed {
                cfg.seed = seed;
            }
            for p in [&mut cfg.teacher, &mut cfg.student] {
                if let Some(v) = ctx.flags.provider_concurrency {
                    p.max_concurrency = v;
                }
            }
            let services = Services::from_config(&cfg)?;
            let outcome = run_grid(&cfg, rq, &services, &GridOptions { force: ctx.force })?;
            for c in &outcome.cells {
                let s = c.report.summary;
                println!(
                    "{:<40} P {:.4}  R {:.4}  C {:.4}{}",
                    c.spec.id,
                    s.precision,
                    s.recall,
                    s.coverage,
                    if c.skipped { "  (cached)" } else { "" }
                );
            }
            println!("summary: {}", outcome.summary.display());
        }
    }
    Ok(())
}

fn existing_store(dir: &Path) -> Result<KnowledgeBase, RunError> {
    if dir.is_dir() {
        Ok(store::load(dir)?)
    } else {
        Ok(KnowledgeBase::new())
    }
}

/// Vectors for target sessions must come from the embedder that built the index.
fn index_vectors(file: Option<&Path>, ctx: &Ctx) -> Result<bundlekd::embedding::SessionVectors, RunError> {
    let cfg = ctx.embedder(file)?;
    if let (bundlekd::embedding::EmbedderKind::Precomputed, Some(p)) = (cfg.kind, &cfg.vectors) {
        return Ok(load_vectors(p)?);
    }
    Ok(build_embedder(&cfg)?.1)
}
