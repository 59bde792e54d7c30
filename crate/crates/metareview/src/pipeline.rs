//! The three-stage meta-review pipeline.
//!
//! Stage 1 (aspect identification) asks, for every (review, aspect) pair,
//! which fragments of the review discuss the aspect. Stage 2 (opinion
//! consolidation) summarizes each aspect's fragment cluster. Stage 3
//! (synthesis) writes the meta-review from the per-aspect summaries. Stages
//! are barriers: nothing of stage N+1 starts until all of stage N finished.
//! Calls within a stage are independent and run through a bounded worker
//! pool; results are folded back in task order, so a run's trace does not
//! depend on the degree of concurrency.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendError, FinishReason, GenerationParams};
use crate::corpus::{DomainConfig, Entity};
use crate::fanout::fan_out;
use crate::prompts::{
    assemble_aspect_id_prompt, assemble_consolidation_prompt, assemble_synthesis_prompt,
    PromptError, RenderedPrompt, TemplateRegistry,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("entity {entity_id}: every aspect cluster is empty; nothing to synthesize")]
    AllAspectsEmpty { entity_id: String },
    #[error("step elicitation returned no usable steps")]
    EmptyStepList,
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
}

/// Which stages execute. The ablations exist to measure what each stage
/// contributes; the reduced plans are not shortcuts for production use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagePlan {
    /// Identification, consolidation, synthesis.
    Full,
    /// No identification: each aspect is consolidated over the full review
    /// texts instead of extracted fragments.
    SkipAi,
    /// No consolidation: synthesis reads each aspect's raw fragments.
    SkipOc,
}

impl StagePlan {
    pub fn as_str(&self) -> &'static str {
        match self {
            StagePlan::Full => "full",
            StagePlan::SkipAi => "skip_ai",
            StagePlan::SkipOc => "skip_oc",
        }
    }
}

/// Which generation system produced an output file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pipeline,
    Naive,
    Chunkwise,
    Autodecomp,
}

impl SystemKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SystemKind::Pipeline => "pipeline",
            SystemKind::Naive => "naive",
            SystemKind::Chunkwise => "chunkwise",
            SystemKind::Autodecomp => "autodecomp",
        }
    }
}

/// How a fragment was located in its source review.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grounding {
    /// Byte-for-byte substring of the review.
    Exact,
    /// Matches after lowercasing, whitespace collapse, and stripping
    /// punctuation at token edges; the span still points into the original.
    Normalized,
    /// Not found; the model paraphrased or invented it.
    Ungrounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub text: String,
    pub review_id: String,
    pub aspect_id: String,
    pub grounding: Grounding,
    /// Character-offset half-open range into the source review.
    pub span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectCluster {
    pub aspect_id: String,
    pub fragments: Vec<Fragment>,
    /// Fragments dropped by strict grounding.
    pub omitted: u32,
}

impl AspectCluster {
    /// Content address of the cluster: what was summarized, not how.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for fragment in &self.fragments {
            for part in [&fragment.review_id, &fragment.text] {
                hasher.update((part.len() as u64).to_le_bytes());
                hasher.update(part.as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectSummary {
    pub aspect_id: String,
    pub text: String,
    /// Digest of the cluster this summary was written from.
    pub cluster_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReview {
    pub entity_id: String,
    pub system: SystemKind,
    pub run_index: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub params: GenerationParams,
    pub plan: StagePlan,
    /// Independent samples per entity; each threads its own run index into
    /// every request, so samples never share cache entries.
    pub runs: u32,
    /// Upper bound on in-flight backend calls within a stage.
    pub concurrency: usize,
    /// Drop ungrounded fragments instead of keeping them.
    pub strict_grounding: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            params: GenerationParams::default(),
            plan: StagePlan::Full,
            runs: 3,
            concurrency: 4,
            strict_grounding: false,
        }
    }
}

// --- trace records -----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationCall {
    pub review_id: String,
    pub aspect_id: String,
    pub prompt_digest: String,
    pub raw_output: String,
    pub finish_reason: FinishReason,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub aspect_id: String,
    pub digest: String,
    pub fragments: Vec<Fragment>,
    pub omitted: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationCall {
    pub aspect_id: String,
    pub prompt_digest: String,
    pub summary: String,
    pub finish_reason: FinishReason,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisCall {
    pub prompt_digest: String,
    pub finish_reason: FinishReason,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

/// One model call made by a baseline system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCall {
    pub label: String,
    pub prompt_digest: String,
    pub output: String,
    pub finish_reason: FinishReason,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

/// Everything one run did, in execution order. Serialized traces are stable:
/// the same corpus, config, and backend give byte-identical files regardless
/// of concurrency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub version: u32,
    pub system: SystemKind,
    pub entity_id: String,
    pub domain_id: String,
    pub run_index: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<StagePlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identification: Option<Vec<IdentificationCall>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clusters: Option<Vec<ClusterRecord>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consolidation: Option<Vec<ConsolidationCall>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisCall>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_calls: Option<Vec<BaselineCall>>,
    pub meta_review: String,
}

impl RunTrace {
    pub fn skeleton(system: SystemKind, entity: &Entity, domain: &DomainConfig, run_index: u32) -> Self {
        RunTrace {
            version: 1,
            system,
            entity_id: entity.entity_id.clone(),
            domain_id: domain.domain_id.clone(),
            run_index,
            plan: None,
            identification: None,
            clusters: None,
            consolidation: None,
            synthesis: None,
            steps: None,
            baseline_calls: None,
            meta_review: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub meta_review: MetaReview,
    pub trace: RunTrace,
}

// --- stage 1: fragment parsing and grounding ---------------------------

const NO_FRAGMENTS_SENTINEL: &str = "no related fragments";

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim_start();
        }
    }
    // Numbered markers: digits then '.' or ')' then a space. The space is
    // required so "3.5 stars" survives.
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(". ").or_else(|| line[digits..].strip_prefix(") ")) {
            return rest.trim_start();
        }
    }
    line
}

fn strip_symmetric_quotes(line: &str) -> &str {
    for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')] {
        let mut chars = line.chars();
        if chars.next() == Some(open) && line.chars().last() == Some(close) && line.chars().count() >= 2 {
            let inner = &line[open.len_utf8()..line.len() - close.len_utf8()];
            return inner.trim();
        }
    }
    line
}

fn is_sentinel(line: &str) -> bool {
    line.trim_end_matches('.')
        .trim()
        .eq_ignore_ascii_case(NO_FRAGMENTS_SENTINEL)
}

/// Splits a raw identification completion into fragment strings.
///
/// Lines are cleaned of list markers and one layer of symmetric quotes.
/// Empty lines vanish. If every remaining line is the no-fragments sentinel
/// (any case, optional final period) the result is empty; sentinel lines
/// inside otherwise substantive output are discarded. Duplicates survive —
/// they are collapsed later, per (review, text), when clusters are built.
pub fn parse_fragment_output(raw: &str) -> Vec<String> {
    let cleaned: Vec<&str> = raw
        .lines()
        .map(|line| strip_symmetric_quotes(strip_list_marker(line)))
        .filter(|line| !line.is_empty())
        .collect();
    if cleaned.iter().all(|line| is_sentinel(line)) {
        return Vec::new();
    }
    cleaned
        .into_iter()
        .filter(|line| !is_sentinel(line))
        .map(str::to_string)
        .collect()
}

/// Lowercases, collapses whitespace runs to single spaces, and strips
/// punctuation from token edges, while recording which original character
/// each normalized character came from.
fn normalize_with_map(text: &str) -> (String, Vec<usize>) {
    let chars: Vec<(usize, char)> = text.chars().enumerate().collect();
    let mut normalized = String::new();
    let mut map = Vec::new();
    let mut token_start = 0;
    while token_start < chars.len() {
        if chars[token_start].1.is_whitespace() {
            token_start += 1;
            continue;
        }
        let mut token_end = token_start;
        while token_end < chars.len() && !chars[token_end].1.is_whitespace() {
            token_end += 1;
        }
        let mut lo = token_start;
        let mut hi = token_end;
        while lo < hi && !chars[lo].1.is_alphanumeric() {
            lo += 1;
        }
        while hi > lo && !chars[hi - 1].1.is_alphanumeric() {
            hi -= 1;
        }
        if lo < hi {
            if !normalized.is_empty() {
                normalized.push(' ');
                // The separator is bookkeeping, not content; point it at the
                // character that follows so spans stay tight.
                map.push(chars[lo].0);
            }
            for &(orig_idx, c) in &chars[lo..hi] {
                for lowered in c.to_lowercase() {
                    normalized.push(lowered);
                    map.push(orig_idx);
                }
            }
        }
        token_start = token_end;
    }
    (normalized, map)
}

/// Locates `fragment` inside `review`, exactly first, then under
/// normalization. Returns the grounding plus a character span such that the
/// review's characters in that range are the matched region.
pub fn ground_fragment(review: &str, fragment: &str) -> (Grounding, Option<(usize, usize)>) {
    if let Some(byte_start) = review.find(fragment) {
        let start = review[..byte_start].chars().count();
        return (Grounding::Exact, Some((start, start + fragment.chars().count())));
    }
    let (review_norm, map) = normalize_with_map(review);
    let (fragment_norm, _) = normalize_with_map(fragment);
    if !fragment_norm.is_empty() {
        if let Some(byte_start) = review_norm.find(&fragment_norm) {
            let start_char = review_norm[..byte_start].chars().count();
            let len_chars = fragment_norm.chars().count();
            let span_start = map[start_char];
            let span_end = map[start_char + len_chars - 1] + 1;
            return (Grounding::Normalized, Some((span_start, span_end)));
        }
    }
    (Grounding::Ungrounded, None)
}

// --- stage drivers ------------------------------------------------------

fn complete_prompt(
    backend: &dyn Backend,
    params: &GenerationParams,
    prompt: &RenderedPrompt,
    run_index: u32,
) -> Result<crate::backend::Completion, PipelineError> {
    let request = params.request(prompt, run_index);
    let completion = backend.complete(&request)?;
    Ok(params.enforce_truncation(completion)?)
}

/// Runs identification for every (aspect, review) pair and folds the output
/// into one cluster per aspect, in the domain's declaration order. Exact
/// (review, text) duplicates collapse to their first occurrence.
pub fn extract_fragments(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    entity: &Entity,
    params: &GenerationParams,
    run_index: u32,
    concurrency: usize,
    strict_grounding: bool,
) -> Result<(Vec<AspectCluster>, Vec<IdentificationCall>), PipelineError> {
    let mut tasks = Vec::new();
    for aspect in &domain.aspects {
        for review in &entity.reviews {
            tasks.push((aspect, review));
        }
    }
    let outcomes = fan_out(tasks, concurrency, |(aspect, review)| {
        let prompt = assemble_aspect_id_prompt(registry, domain, aspect, &review.text)?;
        let completion = complete_prompt(backend, params, &prompt, run_index)?;
        let fragments: Vec<Fragment> = parse_fragment_output(&completion.text)
            .into_iter()
            .map(|text| {
                let (grounding, span) = ground_fragment(&review.text, &text);
                Fragment {
                    text,
                    review_id: review.review_id.clone(),
                    aspect_id: aspect.aspect_id.clone(),
                    grounding,
                    span,
                }
            })
            .collect();
        let record = IdentificationCall {
            review_id: review.review_id.clone(),
            aspect_id: aspect.aspect_id.clone(),
            prompt_digest: prompt.bindings_digest,
            raw_output: completion.text,
            finish_reason: completion.finish_reason,
            prompt_tokens: completion.usage.prompt_tokens,
            output_tokens: completion.usage.output_tokens,
        };
        Ok::<_, PipelineError>((record, fragments))
    });
    let mut calls = Vec::new();
    let mut clusters: Vec<AspectCluster> = domain
        .aspects
        .iter()
        .map(|aspect| AspectCluster {
            aspect_id: aspect.aspect_id.clone(),
            fragments: Vec::new(),
            omitted: 0,
        })
        .collect();
    let per_aspect = entity.reviews.len();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let (record, fragments) = outcome?;
        let cluster = &mut clusters[i / per_aspect];
        for fragment in fragments {
            if strict_grounding && fragment.grounding == Grounding::Ungrounded {
                cluster.omitted += 1;
                continue;
            }
            let duplicate = cluster
                .fragments
                .iter()
                .any(|f| f.review_id == fragment.review_id && f.text == fragment.text);
            if !duplicate {
                cluster.fragments.push(fragment);
            }
        }
        calls.push(record);
    }
    Ok((clusters, calls))
}

/// Summarizes one non-empty cluster.
pub fn consolidate_cluster(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    cluster: &AspectCluster,
    params: &GenerationParams,
    run_index: u32,
) -> Result<(AspectSummary, ConsolidationCall), PipelineError> {
    let texts: Vec<String> = cluster.fragments.iter().map(|f| f.text.clone()).collect();
    let prompt = assemble_consolidation_prompt(registry, domain, &texts)?;
    let completion = complete_prompt(backend, params, &prompt, run_index)?;
    let summary = AspectSummary {
        aspect_id: cluster.aspect_id.clone(),
        text: completion.text.clone(),
        cluster_digest: cluster.digest(),
    };
    let call = ConsolidationCall {
        aspect_id: cluster.aspect_id.clone(),
        prompt_digest: prompt.bindings_digest,
        summary: completion.text,
        finish_reason: completion.finish_reason,
        prompt_tokens: completion.usage.prompt_tokens,
        output_tokens: completion.usage.output_tokens,
    };
    Ok((summary, call))
}

/// Writes the meta-review from labeled per-aspect blocks.
pub fn synthesize_meta_review(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    blocks: &[(String, String)],
    params: &GenerationParams,
    run_index: u32,
) -> Result<(String, SynthesisCall), PipelineError> {
    let prompt = assemble_synthesis_prompt(registry, domain, blocks)?;
    let completion = complete_prompt(backend, params, &prompt, run_index)?;
    let call = SynthesisCall {
        prompt_digest: prompt.bindings_digest,
        finish_reason: completion.finish_reason,
        prompt_tokens: completion.usage.prompt_tokens,
        output_tokens: completion.usage.output_tokens,
    };
    Ok((completion.text, call))
}

fn aspect_display_name(domain: &DomainConfig, aspect_id: &str) -> String {
    domain
        .aspect(aspect_id)
        .map(|a| a.name.clone())
        .unwrap_or_else(|| aspect_id.to_string())
}

fn run_single(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    entity: &Entity,
    config: &PipelineConfig,
    run_index: u32,
) -> Result<PipelineRun, PipelineError> {
    let mut trace = RunTrace::skeleton(SystemKind::Pipeline, entity, domain, run_index);
    trace.plan = Some(config.plan);

    // Stage 1 — or its ablation, which clusters whole reviews per aspect.
    let clusters = match config.plan {
        StagePlan::Full | StagePlan::SkipOc => {
            let (clusters, calls) = extract_fragments(
                backend,
                registry,
                domain,
                entity,
                &config.params,
                run_index,
                config.concurrency,
                config.strict_grounding,
            )?;
            trace.identification = Some(calls);
            clusters
        }
        StagePlan::SkipAi => domain
            .aspects
            .iter()
            .map(|aspect| AspectCluster {
                aspect_id: aspect.aspect_id.clone(),
                fragments: entity
                    .reviews
                    .iter()
                    .map(|review| Fragment {
                        text: review.text.clone(),
                        review_id: review.review_id.clone(),
                        aspect_id: aspect.aspect_id.clone(),
                        grounding: Grounding::Exact,
                        span: Some((0, review.text.chars().count())),
                    })
                    .collect(),
                omitted: 0,
            })
            .collect(),
    };
    trace.clusters = Some(
        clusters
            .iter()
            .map(|c| ClusterRecord {
                aspect_id: c.aspect_id.clone(),
                digest: c.digest(),
                fragments: c.fragments.clone(),
                omitted: c.omitted,
            })
            .collect(),
    );

    // Aspects whose cluster came back empty are dropped here and never
    // reach the later stages or the meta-review.
    let occupied: Vec<&AspectCluster> = clusters.iter().filter(|c| !c.fragments.is_empty()).collect();
    if occupied.is_empty() {
        return Err(PipelineError::AllAspectsEmpty {
            entity_id: entity.entity_id.clone(),
        });
    }

    // Stage 2 — or its ablation, which forwards raw fragments.
    let blocks: Vec<(String, String)> = match config.plan {
        StagePlan::Full | StagePlan::SkipAi => {
            let outcomes = fan_out(occupied, config.concurrency, |cluster| {
                consolidate_cluster(backend, registry, domain, cluster, &config.params, run_index)
            });
            let mut calls = Vec::new();
            let mut blocks = Vec::new();
            for outcome in outcomes {
                let (summary, call) = outcome?;
                blocks.push((aspect_display_name(domain, &summary.aspect_id), summary.text));
                calls.push(call);
            }
            trace.consolidation = Some(calls);
            blocks
        }
        StagePlan::SkipOc => occupied
            .iter()
            .map(|cluster| {
                let joined = cluster
                    .fragments
                    .iter()
                    .map(|f| f.text.as_str())
                    .collect::<Vec<_>>()
                    .join("\n");
                (aspect_display_name(domain, &cluster.aspect_id), joined)
            })
            .collect(),
    };

    // Stage 3.
    let (text, call) = synthesize_meta_review(backend, registry, domain, &blocks, &config.params, run_index)?;
    trace.synthesis = Some(call);
    trace.meta_review = text.clone();
    Ok(PipelineRun {
        meta_review: MetaReview {
            entity_id: entity.entity_id.clone(),
            system: SystemKind::Pipeline,
            run_index,
            text,
        },
        trace,
    })
}

/// Runs the configured number of independent samples for one entity.
pub fn run_pipeline(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    entity: &Entity,
    config: &PipelineConfig,
) -> Result<Vec<PipelineRun>, PipelineError> {
    if config.runs == 0 {
        return Err(PipelineError::InvalidConfig("runs must be at least 1".into()));
    }
    (0..config.runs)
        .map(|run_index| run_single(backend, registry, domain, entity, config, run_index))
        .collect()
}
