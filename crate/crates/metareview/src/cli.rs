//! Command-line interface: `run` generations, `evaluate` their outputs,
//! inspect a `trace`, `compare` runs, and `purge-cache`.
//!
//! Every `run` writes its resolved configuration to `<out>/manifest.json`;
//! `run --manifest` replays it exactly, and `evaluate`/`trace`/`compare`
//! read it so a run directory is self-describing. Exit codes: 0 success,
//! 1 fatal configuration or I/O error, 2 finished with per-entity failures.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::cache::{CachedBackend, DiskCache};
use crate::backend::mock::MockBackend;
use crate::backend::remote::{RemoteBackend, RemoteConfig, DEFAULT_API_KEY_ENV};
use crate::backend::{Backend, GenerationParams};
use crate::baselines::{
    concat_reviews, run_automatic_decomposition, run_chunkwise, run_naive_aspect_prompting,
};
use crate::corpus::{load_corpus, sample_reviews, DomainConfig, Entity, Split};
use crate::eval::alignscore::AlignScoreClient;
use crate::eval::{
    aggregate_runs, coverage_f1, detect_aspects_in_reviews, detect_aspects_in_text,
    fragment_overlap, geval_score, rouge, EvalReport, OverlapSemantics, RunLabel,
};
use crate::pipeline::{
    run_pipeline, Grounding, PipelineConfig, PipelineError, PipelineRun, RunTrace, StagePlan,
    SystemKind,
};
use crate::prompts::TemplateRegistry;

#[derive(Parser)]
#[command(name = "metareview", version, about = "Aspect-grounded meta-review generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate meta-reviews for every entity in a corpus.
    Run(RunArgs),
    /// Score the outputs of a finished run.
    Evaluate(EvaluateArgs),
    /// Pretty-print the trace of one (entity, run).
    Trace(TraceArgs),
    /// Tabulate evaluation results from several run directories.
    Compare(CompareArgs),
    /// Delete all cached completions under a cache directory.
    PurgeCache(PurgeCacheArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Mock => "mock",
            BackendKind::Remote => "remote",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SystemArg {
    Pipeline,
    Naive,
    Chunkwise,
    Autodecomp,
}

impl From<SystemArg> for SystemKind {
    fn from(arg: SystemArg) -> Self {
        match arg {
            SystemArg::Pipeline => SystemKind::Pipeline,
            SystemArg::Naive => SystemKind::Naive,
            SystemArg::Chunkwise => SystemKind::Chunkwise,
            SystemArg::Autodecomp => SystemKind::Autodecomp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PlanArg {
    Full,
    SkipAi,
    SkipOc,
}

impl From<PlanArg> for StagePlan {
    fn from(arg: PlanArg) -> Self {
        match arg {
            PlanArg::Full => StagePlan::Full,
            PlanArg::SkipAi => StagePlan::SkipAi,
            PlanArg::SkipOc => StagePlan::SkipOc,
        }
    }
}

#[derive(Args)]
pub struct RunArgs {
    /// Replay a previously written manifest instead of passing flags.
    #[arg(long, conflicts_with_all = ["corpus", "domain_config", "out"])]
    pub manifest: Option<PathBuf>,
    /// JSONL corpus of entities to summarize.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Domain configuration (aspects, wording, chunk policy).
    #[arg(long)]
    pub domain_config: Option<PathBuf>,
    /// Output directory for meta-reviews, traces, and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pipeline")]
    pub system: SystemArg,
    #[arg(long, value_enum, default_value = "full")]
    pub plan: PlanArg,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Independent generations per entity.
    #[arg(long, default_value_t = 3)]
    pub runs: u32,
    /// Seed for review sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Completion cache location (default: <out>/cache).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Maximum in-flight backend calls within a stage.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Model identifier sent to the backend.
    #[arg(long, default_value = "mock")]
    pub model: String,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    /// Base URL of an OpenAI-compatible server (remote backend).
    #[arg(long)]
    pub remote_url: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Keep only this fraction of each entity's reviews (sampled by seed).
    #[arg(long)]
    pub sample_fraction: Option<f64>,
    /// JSON map of lowercase aspect name to keyword list for the mock.
    #[arg(long)]
    pub mock_keywords: Option<PathBuf>,
    /// Drop fragments that cannot be located in their source review.
    #[arg(long)]
    pub strict_grounding: bool,
    /// Accept completions cut off at the token limit instead of failing.
    #[arg(long)]
    pub accept_truncated: bool,
    /// Directory of template overrides loaded on top of the built-ins.
    #[arg(long)]
    pub template_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// A directory previously produced by `run`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Comma-separated: coverage, geval, alignscore, rouge, overlap.
    #[arg(long, default_value = "coverage")]
    pub metrics: String,
    /// Base URL of an AlignScore scoring server.
    #[arg(long)]
    pub scorer_url: Option<String>,
    /// Stem tokens in rouge and overlap.
    #[arg(long)]
    pub stem: bool,
    /// Count each distinct word once in overlap instead of per occurrence.
    #[arg(long)]
    pub overlap_set: bool,
}

#[derive(Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub entity: String,
    #[arg(long, default_value_t = 0)]
    pub run: u32,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Evaluated run directories (repeat the flag for each).
    #[arg(long = "run-dir", required = true)]
    pub run_dirs: Vec<PathBuf>,
    /// Also show published reference numbers for this domain.
    #[arg(long)]
    pub reported: Option<String>,
    /// Emit the table as JSON instead of Markdown.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct PurgeCacheArgs {
    #[arg(long)]
    pub cache_dir: PathBuf,
}

/// The full, resolved configuration of one `run` invocation. Written to
/// `<out>/manifest.json`; replaying it reproduces the run byte for byte
/// given the same cache or a deterministic backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub corpus: PathBuf,
    pub domain_config: PathBuf,
    pub system: SystemKind,
    pub plan: StagePlan,
    pub backend: BackendKind,
    pub model_id: String,
    pub temperature: f64,
    pub runs: u32,
    pub seed: u64,
    pub concurrency: usize,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_keywords: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub strict_grounding: bool,
    #[serde(default)]
    pub accept_truncated: bool,
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

pub fn meta_path(out_dir: &Path, entity_id: &str, run: u32) -> PathBuf {
    out_dir.join("meta").join(format!("{}.run{run}.txt", safe_name(entity_id)))
}

pub fn trace_path(out_dir: &Path, entity_id: &str, run: u32) -> PathBuf {
    out_dir.join("traces").join(format!("{}.run{run}.json", safe_name(entity_id)))
}

pub fn error_path(out_dir: &Path, entity_id: &str) -> PathBuf {
    out_dir.join("errors").join(format!("{}.json", safe_name(entity_id)))
}

/// Per-entity sampling seed: the run seed mixed with a digest of the entity
/// id, so a given entity samples the same reviews regardless of corpus order.
pub fn entity_seed(seed: u64, entity_id: &str) -> u64 {
    let digest = Sha256::digest(entity_id.as_bytes());
    let mut eight = [0u8; 8];
    eight.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(eight)
}

fn resolve_manifest(args: &RunArgs) -> Result<RunManifest, String> {
    if let Some(path) = &args.manifest {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read manifest {}: {e}", path.display()))?;
        return serde_json::from_str(&text)
            .map_err(|e| format!("malformed manifest {}: {e}", path.display()));
    }
    let corpus = args.corpus.clone().ok_or("--corpus is required (or --manifest)")?;
    let domain_config = args
        .domain_config
        .clone()
        .ok_or("--domain-config is required (or --manifest)")?;
    let out_dir = args.out.clone().ok_or("--out is required (or --manifest)")?;
    Ok(RunManifest {
        corpus,
        domain_config,
        system: args.system.into(),
        plan: args.plan.into(),
        backend: args.backend,
        model_id: args.model.clone(),
        temperature: args.temperature,
        runs: args.runs,
        seed: args.seed,
        concurrency: args.concurrency,
        cache_dir: args.cache_dir.clone().unwrap_or_else(|| out_dir.join("cache")),
        out_dir,
        sample_fraction: args.sample_fraction,
        mock_keywords: args.mock_keywords.clone(),
        template_dir: args.template_dir.clone(),
        remote_url: args.remote_url.clone(),
        api_key_env: args.api_key_env.clone(),
        strict_grounding: args.strict_grounding,
        accept_truncated: args.accept_truncated,
    })
}

fn build_registry(manifest: &RunManifest) -> Result<TemplateRegistry, String> {
    let mut registry = TemplateRegistry::builtin();
    if let Some(dir) = &manifest.template_dir {
        registry.load_dir(dir).map_err(|e| e.to_string())?;
    }
    Ok(registry)
}

fn build_backend(manifest: &RunManifest) -> Result<CachedBackend<Box<dyn Backend>>, String> {
    let inner: Box<dyn Backend> = match manifest.backend {
        BackendKind::Mock => {
            let mut mock = MockBackend::new();
            if let Some(path) = &manifest.mock_keywords {
                let text = fs::read_to_string(path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                let map: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
                    .map_err(|e| format!("malformed keyword map {}: {e}", path.display()))?;
                for (aspect, keywords) in map {
                    mock.register_keywords(&aspect, keywords);
                }
            }
            Box::new(mock)
        }
        BackendKind::Remote => {
            let base_url = manifest.remote_url.clone().ok_or("remote backend needs --remote-url")?;
            let config = RemoteConfig {
                base_url,
                api_key_env: manifest
                    .api_key_env
                    .clone()
                    .unwrap_or_else(|| DEFAULT_API_KEY_ENV.to_string()),
                ..RemoteConfig::default()
            };
            Box::new(RemoteBackend::new(config).map_err(|e| e.to_string())?)
        }
    };
    let cache = DiskCache::open(&manifest.cache_dir).map_err(|e| e.to_string())?;
    Ok(CachedBackend::new(inner, cache))
}

fn params_from(manifest: &RunManifest) -> GenerationParams {
    GenerationParams {
        model_id: manifest.model_id.clone(),
        temperature: manifest.temperature,
        accept_truncated: manifest.accept_truncated,
        ..GenerationParams::default()
    }
}

fn prepared_entity(manifest: &RunManifest, entity: &Entity) -> Result<Entity, String> {
    match manifest.sample_fraction {
        Some(fraction) => {
            sample_reviews(entity, fraction, entity_seed(manifest.seed, &entity.entity_id))
                .map_err(|e| e.to_string())
        }
        None => Ok(entity.clone()),
    }
}

fn generate_entity(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    entity: &Entity,
    manifest: &RunManifest,
) -> Result<Vec<PipelineRun>, PipelineError> {
    let params = params_from(manifest);
    match manifest.system {
        SystemKind::Pipeline => {
            let config = PipelineConfig {
                params,
                plan: manifest.plan,
                runs: manifest.runs,
                concurrency: manifest.concurrency,
                strict_grounding: manifest.strict_grounding,
            };
            run_pipeline(backend, registry, domain, entity, &config)
        }
        SystemKind::Naive => (0..manifest.runs)
            .map(|r| run_naive_aspect_prompting(backend, registry, domain, entity, &params, r))
            .collect(),
        SystemKind::Chunkwise => (0..manifest.runs)
            .map(|r| run_chunkwise(backend, registry, domain, entity, &params, r, manifest.concurrency))
            .collect(),
        SystemKind::Autodecomp => (0..manifest.runs)
            .map(|r| run_automatic_decomposition(backend, registry, domain, entity, &params, r))
            .collect(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
    }
    fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    write_text(path, &text)
}

pub fn cmd_run(args: &RunArgs) -> Result<i32, String> {
    let manifest = resolve_manifest(args)?;
    if manifest.runs == 0 {
        return Err("--runs must be at least 1".into());
    }
    let domain = DomainConfig::from_path(&manifest.domain_config).map_err(|e| e.to_string())?;
    let registry = build_registry(&manifest)?;
    let corpus = load_corpus(&manifest.corpus, &domain, Split::Test).map_err(|e| e.to_string())?;
    let backend = build_backend(&manifest)?;
    write_json(&manifest.out_dir.join("manifest.json"), &manifest)?;

    let mut failed = 0usize;
    for entity in &corpus.entities {
        let prepared = prepared_entity(&manifest, entity)?;
        match generate_entity(&backend, &registry, &domain, &prepared, &manifest) {
            Ok(runs) => {
                for run in &runs {
                    let mut meta = run.meta_review.text.clone();
                    meta.push('\n');
                    write_text(
                        &meta_path(&manifest.out_dir, &entity.entity_id, run.meta_review.run_index),
                        &meta,
                    )?;
                    write_json(
                        &trace_path(&manifest.out_dir, &entity.entity_id, run.trace.run_index),
                        &run.trace,
                    )?;
                }
                println!("{}: {} runs written", entity.entity_id, runs.len());
            }
            Err(error) => {
                failed += 1;
                let record = serde_json::json!({
                    "entity_id": entity.entity_id,
                    "system": manifest.system.as_str(),
                    "error": error.to_string(),
                });
                write_json(&error_path(&manifest.out_dir, &entity.entity_id), &record)?;
                eprintln!("{}: failed: {error}", entity.entity_id);
            }
        }
    }
    if failed > 0 {
        eprintln!(
            "{failed} of {} entities failed; see {}",
            corpus.entities.len(),
            manifest.out_dir.join("errors").display()
        );
        Ok(2)
    } else {
        Ok(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Metric {
    Coverage,
    Geval,
    Alignscore,
    Rouge,
    Overlap,
}

impl Metric {
    /// Parses a comma-separated selection into deduplicated metrics in the
    /// fixed report column order.
    fn parse_list(raw: &str) -> Result<Vec<Metric>, String> {
        let mut metrics = Vec::new();
        for name in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let metric = match name {
                "coverage" => Metric::Coverage,
                "geval" => Metric::Geval,
                "alignscore" => Metric::Alignscore,
                "rouge" => Metric::Rouge,
                "overlap" => Metric::Overlap,
                other => {
                    return Err(format!(
                        "unknown metric {other:?}; expected coverage, geval, alignscore, rouge, overlap"
                    ))
                }
            };
            if !metrics.contains(&metric) {
                metrics.push(metric);
            }
        }
        if metrics.is_empty() {
            return Err("no metrics requested".into());
        }
        metrics.sort();
        Ok(metrics)
    }
}

fn read_manifest(run_dir: &Path) -> Result<RunManifest, String> {
    let path = run_dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {}: {e} (is this a run directory?)", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("malformed manifest {}: {e}", path.display()))
}

fn read_meta(run_dir: &Path, entity_id: &str, run: u32) -> Result<String, String> {
    let path = meta_path(run_dir, entity_id, run);
    let text =
        fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok(text.strip_suffix('\n').unwrap_or(&text).to_string())
}

fn read_trace(run_dir: &Path, entity_id: &str, run: u32) -> Result<RunTrace, String> {
    let path = trace_path(run_dir, entity_id, run);
    if !path.exists() {
        return Err(format!(
            "no trace found for entity {entity_id:?} run {run} under {}",
            run_dir.display()
        ));
    }
    let text =
        fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("malformed trace {}: {e}", path.display()))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<i32, String> {
    let manifest = read_manifest(&args.run_dir)?;
    let metrics = Metric::parse_list(&args.metrics)?;
    let domain = DomainConfig::from_path(&manifest.domain_config).map_err(|e| e.to_string())?;
    let registry = build_registry(&manifest)?;
    let corpus = load_corpus(&manifest.corpus, &domain, Split::Test).map_err(|e| e.to_string())?;
    let backend = build_backend(&manifest)?;
    let params = params_from(&manifest);
    let scorer = if metrics.contains(&Metric::Alignscore) {
        let url = args
            .scorer_url
            .as_deref()
            .ok_or("--scorer-url is required for the alignscore metric")?;
        Some(AlignScoreClient::new(url).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let semantics =
        if args.overlap_set { OverlapSemantics::Set } else { OverlapSemantics::Multiset };

    // Entities that produced output; ones recorded under errors/ are absent.
    let evaluated: Vec<&Entity> = corpus
        .entities
        .iter()
        .filter(|e| meta_path(&args.run_dir, &e.entity_id, 0).exists())
        .collect();
    if evaluated.is_empty() {
        return Err(format!(
            "no generated meta-reviews under {}",
            args.run_dir.join("meta").display()
        ));
    }

    // Data requirements fail before any scoring happens, not halfway in.
    let needs_reference = metrics.contains(&Metric::Rouge) || metrics.contains(&Metric::Alignscore);
    for entity in &evaluated {
        if needs_reference && entity.reference_meta_review.is_none() {
            return Err(format!(
                "entity {} has no reference meta-review, required by rouge/alignscore",
                entity.entity_id
            ));
        }
        if metrics.contains(&Metric::Overlap) {
            if entity.gold_fragments.is_none() {
                return Err(format!(
                    "entity {} has no gold fragment annotations, required by overlap",
                    entity.entity_id
                ));
            }
            if manifest.system != SystemKind::Pipeline {
                return Err("overlap scores identification output; the evaluated run must be \
                            a pipeline run with traces"
                    .into());
            }
        }
    }

    let mut all_reports: Vec<EvalReport> = Vec::new();
    let mut entity_means: Vec<EvalReport> = Vec::new();
    for entity in &evaluated {
        let prepared = prepared_entity(&manifest, entity)?;
        let mut run_reports = Vec::new();
        for run in 0..manifest.runs {
            let meta_text = read_meta(&args.run_dir, &entity.entity_id, run)?;
            let mut report =
                EvalReport::empty(&entity.entity_id, manifest.system, RunLabel::Run(run));
            for metric in &metrics {
                match metric {
                    Metric::Coverage => {
                        let generated = detect_aspects_in_text(
                            &backend, &registry, &domain, &meta_text, &params, run,
                        )
                        .map_err(|e| e.to_string())?;
                        let source = detect_aspects_in_reviews(
                            &backend,
                            &registry,
                            &domain,
                            &prepared,
                            &params,
                            run,
                            manifest.concurrency,
                        )
                        .map_err(|e| e.to_string())?;
                        report.coverage =
                            Some(coverage_f1(&generated, &source).map_err(|e| e.to_string())?);
                    }
                    Metric::Geval => {
                        report.geval = Some(
                            geval_score(&backend, &registry, &domain, &prepared, &meta_text, &params)
                                .map_err(|e| e.to_string())?,
                        );
                    }
                    Metric::Alignscore => {
                        let scorer = scorer.as_ref().unwrap();
                        report.alignscore_r = Some(
                            scorer
                                .score(&concat_reviews(&prepared), &meta_text)
                                .map_err(|e| e.to_string())?,
                        );
                        let reference = entity.reference_meta_review.as_deref().unwrap();
                        report.alignscore_m =
                            Some(scorer.score(reference, &meta_text).map_err(|e| e.to_string())?);
                    }
                    Metric::Rouge => {
                        let reference = entity.reference_meta_review.as_deref().unwrap();
                        report.rouge =
                            Some(rouge(&meta_text, reference, args.stem).map_err(|e| e.to_string())?);
                    }
                    Metric::Overlap => {
                        let trace = read_trace(&args.run_dir, &entity.entity_id, run)?;
                        let clusters = trace
                            .clusters
                            .as_ref()
                            .ok_or("trace has no clusters; cannot compute overlap")?;
                        let predicted: Vec<String> = clusters
                            .iter()
                            .flat_map(|c| c.fragments.iter().map(|f| f.text.clone()))
                            .collect();
                        let gold: Vec<String> = entity
                            .gold_fragments
                            .as_ref()
                            .unwrap()
                            .values()
                            .flat_map(|fragments| fragments.iter().map(|f| f.text.clone()))
                            .collect();
                        report.overlap =
                            Some(fragment_overlap(&predicted, &gold, semantics, args.stem));
                    }
                }
            }
            run_reports.push(report);
        }
        entity_means.push(aggregate_runs(&run_reports).map_err(|e| e.to_string())?);
        all_reports.extend(run_reports);
    }

    let mut reports = all_reports.clone();
    // Per-run means across entities only add information with >1 entity.
    if evaluated.len() > 1 {
        for run in 0..manifest.runs {
            let slice: Vec<EvalReport> = all_reports
                .iter()
                .filter(|r| r.label == RunLabel::Run(run))
                .cloned()
                .collect();
            let mut mean = aggregate_runs(&slice).map_err(|e| e.to_string())?;
            mean.label = RunLabel::Run(run);
            mean.entity_id = "all".into();
            reports.push(mean);
        }
    }
    reports.extend(entity_means.iter().cloned());
    let mut overall = aggregate_runs(&entity_means).map_err(|e| e.to_string())?;
    overall.entity_id = "all".into();
    reports.push(overall.clone());

    write_json(&args.run_dir.join("eval").join("report.json"), &reports)?;
    let markdown = render_report_md(&manifest, &entity_means, &overall, &metrics);
    write_text(&args.run_dir.join("eval").join("report.md"), &markdown)?;
    print!("{markdown}");
    Ok(0)
}

fn format_cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "—".to_string(),
    }
}

type Column = (&'static str, fn(&EvalReport) -> Option<f64>);

fn metric_columns(metrics: &[Metric]) -> Vec<Column> {
    let mut columns: Vec<Column> = Vec::new();
    for metric in metrics {
        match metric {
            Metric::Coverage => columns.push(("Coverage", |r| r.coverage)),
            Metric::Geval => columns.push(("G-Eval", |r| r.geval)),
            Metric::Alignscore => {
                columns.push(("AlignScore-R", |r| r.alignscore_r));
                columns.push(("AlignScore-M", |r| r.alignscore_m));
            }
            Metric::Rouge => columns.push(("Rouge", |r| r.rouge.map(|s| s.mean))),
            Metric::Overlap => columns.push(("Overlap-F1", |r| r.overlap.map(|s| s.f1))),
        }
    }
    columns
}

fn render_report_md(
    manifest: &RunManifest,
    entity_means: &[EvalReport],
    overall: &EvalReport,
    metrics: &[Metric],
) -> String {
    let columns = metric_columns(metrics);
    let mut out = String::new();
    out.push_str("# Evaluation report\n\n");
    out.push_str(&format!(
        "System `{}` (plan `{}`), model `{}`, {} runs per entity, backend `{}`.\n",
        manifest.system.as_str(),
        manifest.plan.as_str(),
        manifest.model_id,
        manifest.runs,
        manifest.backend.as_str(),
    ));
    out.push_str("Scores are means over runs; the `all` row averages entities.\n\n");
    out.push_str("| Entity |");
    for (name, _) in &columns {
        out.push_str(&format!(" {name} |"));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &columns {
        out.push_str("---|");
    }
    out.push('\n');
    for report in entity_means {
        out.push_str(&format!("| {} |", report.entity_id));
        for (_, get) in &columns {
            out.push_str(&format!(" {} |", format_cell(get(report))));
        }
        out.push('\n');
    }
    out.push_str("| **all** |");
    for (_, get) in &columns {
        out.push_str(&format!(" **{}** |", format_cell(get(overall))));
    }
    out.push('\n');
    out
}

pub fn cmd_trace(args: &TraceArgs) -> Result<i32, String> {
    let trace = read_trace(&args.run_dir, &args.entity, args.run)?;
    print!("{}", render_trace_md(&trace));
    Ok(0)
}

fn md_escape_cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', "<br>")
}

/// Renders a stored trace as a readable Markdown document: per aspect, the
/// fragment cluster with source review ids and grounding marks, then the
/// consolidated summary, then the final meta-review. Every fragment in the
/// trace appears in the output.
pub fn render_trace_md(trace: &RunTrace) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# {} — run {} ({})\n\n",
        trace.entity_id,
        trace.run_index,
        trace.system.as_str()
    ));
    if let Some(plan) = trace.plan {
        out.push_str(&format!("Plan: `{}`\n\n", plan.as_str()));
    }
    if let Some(calls) = &trace.identification {
        out.push_str(&format!("## Identification ({} calls)\n\n", calls.len()));
        out.push_str("| Review | Aspect | Output |\n|---|---|---|\n");
        for call in calls {
            out.push_str(&format!(
                "| {} | {} | {} |\n",
                call.review_id,
                call.aspect_id,
                md_escape_cell(&call.raw_output)
            ));
        }
        out.push('\n');
    }
    if let Some(clusters) = &trace.clusters {
        out.push_str("## Clusters\n\n");
        for cluster in clusters {
            let dropped = if cluster.omitted > 0 {
                format!(" ({} dropped by strict grounding)", cluster.omitted)
            } else {
                String::new()
            };
            out.push_str(&format!(
                "### {} — {} fragments{}\n\n",
                cluster.aspect_id,
                cluster.fragments.len(),
                dropped
            ));
            if cluster.fragments.is_empty() {
                out.push_str("no fragments identified\n\n");
                continue;
            }
            for fragment in &cluster.fragments {
                let grounding = match fragment.grounding {
                    Grounding::Exact => "exact",
                    Grounding::Normalized => "normalized",
                    Grounding::Ungrounded => "ungrounded",
                };
                let span = fragment
                    .span
                    .map(|(start, end)| format!(" {start}..{end}"))
                    .unwrap_or_default();
                out.push_str(&format!(
                    "- {} ({grounding}{span} in {})\n",
                    fragment.text, fragment.review_id
                ));
            }
            out.push('\n');
        }
    }
    if let Some(calls) = &trace.consolidation {
        out.push_str("## Aspect summaries\n\n");
        for call in calls {
            out.push_str(&format!("### {}\n\n{}\n\n", call.aspect_id, call.summary));
        }
    }
    if let Some(steps) = &trace.steps {
        out.push_str("## Elicited steps\n\n");
        for (i, step) in steps.iter().enumerate() {
            out.push_str(&format!("{}. {step}\n", i + 1));
        }
        out.push('\n');
    }
    if let Some(calls) = &trace.baseline_calls {
        out.push_str(&format!("## Calls ({})\n\n", calls.len()));
        for call in calls {
            out.push_str(&format!("### {}\n\n{}\n\n", call.label, call.output));
        }
    }
    out.push_str("## Meta-review\n\n");
    out.push_str(&trace.meta_review);
    out.push('\n');
    out
}

/// Published reference numbers rendered by `compare --reported`; rouge there
/// is on a 0-100 scale and is divided by 100 to match computed scores.
static REPORTED_RESULTS: &str = include_str!("../assets/reported_results.json");

#[derive(Debug, Deserialize)]
struct ReportedRow {
    label: String,
    coverage: f64,
    geval: f64,
    alignscore_r: f64,
    alignscore_m: f64,
    rouge: f64,
}

#[derive(Debug, Deserialize)]
struct ReportedResults {
    domains: BTreeMap<String, Vec<ReportedRow>>,
}

/// One row of the comparison table; `reported` rows come from the published
/// numbers and are never marked best.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub reported: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geval: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignscore_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignscore_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap_f1: Option<f64>,
}

const COMPARE_COLUMNS: [(&str, fn(&CompareRow) -> Option<f64>); 6] = [
    ("Coverage", |r| r.coverage),
    ("G-Eval", |r| r.geval),
    ("AlignScore-R", |r| r.alignscore_r),
    ("AlignScore-M", |r| r.alignscore_m),
    ("Rouge", |r| r.rouge),
    ("Overlap-F1", |r| r.overlap_f1),
];

fn compare_row(label: &str, report: &EvalReport) -> CompareRow {
    CompareRow {
        label: format!("{label} ({})", report.system.as_str()),
        reported: false,
        coverage: report.coverage,
        geval: report.geval,
        alignscore_r: report.alignscore_r,
        alignscore_m: report.alignscore_m,
        rouge: report.rouge.map(|s| s.mean),
        overlap_f1: report.overlap.map(|s| s.f1),
    }
}

fn reported_rows(domain: &str) -> Result<Vec<CompareRow>, String> {
    let results: ReportedResults = serde_json::from_str(REPORTED_RESULTS)
        .map_err(|e| format!("embedded reported results are malformed: {e}"))?;
    let rows = results.domains.get(domain).ok_or_else(|| {
        format!(
            "no reported results for domain {domain:?}; available: {}",
            results.domains.keys().cloned().collect::<Vec<_>>().join(", ")
        )
    })?;
    Ok(rows
        .iter()
        .map(|row| CompareRow {
            label: format!("reported: {}", row.label),
            reported: true,
            coverage: Some(row.coverage),
            geval: Some(row.geval),
            alignscore_r: Some(row.alignscore_r),
            alignscore_m: Some(row.alignscore_m),
            rouge: Some(row.rouge / 100.0),
            overlap_f1: None,
        })
        .collect())
}

fn metric_signature(row: &CompareRow) -> Vec<&'static str> {
    COMPARE_COLUMNS
        .iter()
        .filter(|(_, get)| get(row).is_some())
        .map(|(name, _)| *name)
        .collect()
}

/// Renders the comparison table. Only columns present in the computed rows
/// appear; the best computed value per column is bold.
pub fn render_compare_md(rows: &[CompareRow]) -> String {
    let columns: Vec<_> = COMPARE_COLUMNS
        .iter()
        .filter(|(_, get)| rows.iter().any(|row| !row.reported && get(row).is_some()))
        .collect();
    let mut best: Vec<Option<f64>> = vec![None; columns.len()];
    for row in rows.iter().filter(|r| !r.reported) {
        for (i, (_, get)) in columns.iter().enumerate() {
            if let Some(value) = get(row) {
                if best[i].is_none_or(|b| value > b) {
                    best[i] = Some(value);
                }
            }
        }
    }
    let mut out = String::new();
    out.push_str("# System comparison\n\n");
    out.push_str(
        "Best computed value per column in bold; `reported` rows are published\n\
         reference numbers (rouge rescaled to 0-1) and are never marked.\n\n",
    );
    out.push_str("| System |");
    for (name, _) in &columns {
        out.push_str(&format!(" {name} |"));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &columns {
        out.push_str("---|");
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("| {} |", md_escape_cell(&row.label)));
        for (i, (_, get)) in columns.iter().enumerate() {
            let value = get(row);
            let is_best = !row.reported
                && match (value, best[i]) {
                    (Some(v), Some(b)) => v >= b,
                    _ => false,
                };
            if is_best {
                out.push_str(&format!(" **{}** |", format_cell(value)));
            } else {
                out.push_str(&format!(" {} |", format_cell(value)));
            }
        }
        out.push('\n');
    }
    out
}

fn overall_row(reports: &[EvalReport]) -> Option<&EvalReport> {
    reports
        .iter()
        .find(|r| r.label == RunLabel::Aggregate && r.entity_id == "all")
}

pub fn cmd_compare(args: &CompareArgs) -> Result<i32, String> {
    if args.run_dirs.len() < 2 && args.reported.is_none() {
        return Err("compare needs at least two --run-dir values (or one plus --reported)".into());
    }
    let mut rows: Vec<CompareRow> = Vec::new();
    for dir in &args.run_dirs {
        let path = dir.join("eval").join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| {
            format!("cannot read {}: {e} (run `evaluate` on this directory first)", path.display())
        })?;
        let reports: Vec<EvalReport> = serde_json::from_str(&text)
            .map_err(|e| format!("malformed report {}: {e}", path.display()))?;
        let overall = overall_row(&reports)
            .ok_or_else(|| format!("{} has no overall aggregate row", path.display()))?;
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        rows.push(compare_row(&label, overall));
    }
    if let Some(first) = rows.first() {
        let signature = metric_signature(first);
        for row in &rows[1..] {
            let other = metric_signature(row);
            if other != signature {
                return Err(format!(
                    "run directories were evaluated with different metrics: {} has [{}], {} has [{}]",
                    rows[0].label,
                    signature.join(", "),
                    row.label,
                    other.join(", ")
                ));
            }
        }
    }
    if let Some(domain) = &args.reported {
        rows.extend(reported_rows(domain)?);
    }
    if args.json {
        let mut text = serde_json::to_string_pretty(&rows).map_err(|e| e.to_string())?;
        text.push('\n');
        print!("{text}");
    } else {
        print!("{}", render_compare_md(&rows));
    }
    Ok(0)
}

pub fn cmd_purge_cache(args: &PurgeCacheArgs) -> Result<i32, String> {
    let cache = DiskCache::open(&args.cache_dir).map_err(|e| e.to_string())?;
    let removed = cache.purge().map_err(|e| e.to_string())?;
    println!("removed {removed} cache entries from {}", args.cache_dir.display());
    Ok(0)
}

pub fn run_cli() -> i32 {
    // Usage errors are config errors (exit 1); 2 is reserved for partial
    // per-entity failures.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Compare(args) => cmd_compare(args),
        Command::PurgeCache(args) => cmd_purge_cache(args),
    };
    match outcome {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::RougeScores;

    #[test]
    fn entity_seed_is_stable_and_id_sensitive() {
        assert_eq!(entity_seed(7, "entity-001"), entity_seed(7, "entity-001"));
        assert_ne!(entity_seed(7, "entity-001"), entity_seed(7, "entity-002"));
        assert_ne!(entity_seed(7, "entity-001"), entity_seed(8, "entity-001"));
    }

    #[test]
    fn metric_list_dedups_and_orders_canonically() {
        let metrics = Metric::parse_list("rouge, coverage,rouge").unwrap();
        assert_eq!(metrics, vec![Metric::Coverage, Metric::Rouge]);
        assert!(Metric::parse_list("bleu").unwrap_err().contains("unknown metric"));
        assert!(Metric::parse_list(" , ").is_err());
    }

    #[test]
    fn flags_resolve_to_manifest_with_derived_cache_dir() {
        let args = RunArgs {
            manifest: None,
            corpus: Some("corpus.jsonl".into()),
            domain_config: Some("domain.json".into()),
            out: Some("out".into()),
            system: SystemArg::Pipeline,
            plan: PlanArg::Full,
            backend: BackendKind::Mock,
            runs: 3,
            seed: 0,
            cache_dir: None,
            concurrency: 4,
            model: "mock".into(),
            temperature: 0.7,
            remote_url: None,
            api_key_env: None,
            sample_fraction: None,
            mock_keywords: None,
            strict_grounding: false,
            accept_truncated: false,
            template_dir: None,
        };
        let manifest = resolve_manifest(&args).unwrap();
        assert_eq!(manifest.cache_dir, PathBuf::from("out/cache"));
        let json = serde_json::to_string(&manifest).unwrap();
        let back: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn embedded_reported_rows_parse_and_rescale_rouge() {
        let rows = reported_rows("scientific").unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.reported));
        // upstream rouge arrives on a 0-100 scale and must come out in [0,1]
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.rouge.unwrap())));
        assert!(reported_rows("nonexistent").unwrap_err().contains("available"));
    }

    #[test]
    fn compare_table_bolds_best_computed_value_only() {
        let mut a = EvalReport::empty("all", SystemKind::Pipeline, RunLabel::Aggregate);
        a.coverage = Some(0.9);
        let mut b = EvalReport::empty("all", SystemKind::Naive, RunLabel::Aggregate);
        b.coverage = Some(0.5);
        let mut rows = vec![compare_row("run-a", &a), compare_row("run-b", &b)];
        rows.push(CompareRow {
            label: "reported: Upstream".into(),
            reported: true,
            coverage: Some(0.97),
            geval: None,
            alignscore_r: None,
            alignscore_m: None,
            rouge: None,
            overlap_f1: None,
        });
        let table = render_compare_md(&rows);
        assert!(table.contains("| run-a (pipeline) | **0.9000** |"));
        assert!(table.contains("| run-b (naive) | 0.5000 |"));
        // reported row shows its value but is never marked best
        assert!(table.contains("| reported: Upstream | 0.9700 |"));
        assert!(!table.contains("**0.9700**"));
    }

    #[test]
    fn report_table_lists_entities_then_overall() {
        let manifest = RunManifest {
            corpus: "c.jsonl".into(),
            domain_config: "d.json".into(),
            system: SystemKind::Pipeline,
            plan: StagePlan::Full,
            backend: BackendKind::Mock,
            model_id: "mock".into(),
            temperature: 0.7,
            runs: 3,
            seed: 0,
            concurrency: 4,
            out_dir: "out".into(),
            cache_dir: "out/cache".into(),
            sample_fraction: None,
            mock_keywords: None,
            template_dir: None,
            remote_url: None,
            api_key_env: None,
            strict_grounding: false,
            accept_truncated: false,
        };
        let mut mean = EvalReport::empty("entity-001", SystemKind::Pipeline, RunLabel::Aggregate);
        mean.coverage = Some(2.0 / 3.0);
        mean.rouge = Some(RougeScores { rouge1: 0.8, rouge2: 0.5, rouge_l: 0.8, mean: 0.7 });
        let mut overall = mean.clone();
        overall.entity_id = "all".into();
        let metrics = Metric::parse_list("rouge,coverage").unwrap();
        let table = render_report_md(&manifest, &[mean], &overall, &metrics);
        assert!(table.contains("| Entity | Coverage | Rouge |"));
        assert!(table.contains("| entity-001 | 0.6667 | 0.7000 |"));
        assert!(table.contains("| **all** | **0.6667** | **0.7000** |"));
    }

    #[test]
    fn trace_markdown_shows_empty_clusters_and_every_fragment() {
        use crate::pipeline::{ClusterRecord, Fragment};
        let entity = Entity {
            entity_id: "e1".into(),
            domain_id: "scientific".into(),
            reviews: vec![],
            reference_meta_review: None,
            gold_fragments: None,
        };
        let mut trace = RunTrace::skeleton(SystemKind::Pipeline, &entity, &sample_domain(), 0);
        trace.plan = Some(StagePlan::Full);
        trace.clusters = Some(vec![
            ClusterRecord {
                aspect_id: "clarity".into(),
                digest: "d".into(),
                fragments: vec![Fragment {
                    text: "well written".into(),
                    review_id: "r1".into(),
                    aspect_id: "clarity".into(),
                    grounding: Grounding::Exact,
                    span: Some((4, 16)),
                }],
                omitted: 0,
            },
            ClusterRecord {
                aspect_id: "novelty".into(),
                digest: "d".into(),
                fragments: vec![],
                omitted: 0,
            },
        ]);
        trace.meta_review = "Final text.".into();
        let doc = render_trace_md(&trace);
        assert!(doc.contains("well written (exact 4..16 in r1)"));
        assert!(doc.contains("no fragments identified"));
        assert!(doc.contains("## Meta-review\n\nFinal text.\n"));
    }

    fn sample_domain() -> DomainConfig {
        DomainConfig::from_json(
            r#"{
                "domain_id": "scientific",
                "entity_noun": "paper",
                "identification_style": "few_shot",
                "consolidation_style": "zero_shot",
                "aspects": [
                    {
                        "aspect_id": "clarity",
                        "name": "Clarity",
                        "definition": "Whether the paper is well written.",
                        "few_shot_examples": [{"input": "a", "output": "b"}]
                    }
                ]
            }"#,
        )
        .unwrap()
    }
}
