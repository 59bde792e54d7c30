//! Single-model baseline systems the pipeline is compared against.
//!
//! Naive aspect prompting sends every review plus the aspect definitions in
//! one call. Chunk-wise summarization summarizes groups of reviews and then
//! aggregates the group summaries. Automatic decomposition first asks the
//! model for a step list, then follows the steps sequentially, feeding each
//! step the previous step's output.

use std::collections::BTreeMap;

use crate::backend::{Backend, GenerationParams};
use crate::corpus::{ChunkPolicy, DomainConfig, Entity};
use crate::fanout::fan_out;
use crate::pipeline::{BaselineCall, MetaReview, PipelineError, PipelineRun, RunTrace, SystemKind};
use crate::prompts::{render_filtered, RenderedPrompt, Stage, TemplateRegistry};

/// A consecutive group of reviews presented to the model as one text.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub review_ids: Vec<String>,
    pub text: String,
}

/// Groups an entity's reviews per the domain's policy. `PerReview` makes one
/// chunk per review; `Fraction(f)` makes groups of `ceil(f * n)` consecutive
/// reviews. Review numbering inside chunk text is global and 1-based, so
/// "Review 7" means the same review in every chunk layout.
pub fn chunk_reviews(entity: &Entity, policy: ChunkPolicy) -> Vec<Chunk> {
    let group_size = match policy {
        ChunkPolicy::PerReview => 1,
        ChunkPolicy::Fraction(fraction) => {
            ((fraction * entity.reviews.len() as f64).ceil() as usize).max(1)
        }
    };
    entity
        .reviews
        .chunks(group_size)
        .enumerate()
        .map(|(chunk_idx, group)| Chunk {
            review_ids: group.iter().map(|r| r.review_id.clone()).collect(),
            text: group
                .iter()
                .enumerate()
                .map(|(i, review)| {
                    format!("Review {}:\n{}", chunk_idx * group_size + i + 1, review.text)
                })
                .collect::<Vec<_>>()
                .join("\n\n"),
        })
        .collect()
}

/// Review texts joined by blank lines — the whole-corpus input format shared
/// by the naive baseline and the decomposition seed.
pub fn concat_reviews(entity: &Entity) -> String {
    entity
        .reviews
        .iter()
        .map(|r| r.text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Numbered aspect definitions as shown to the naive baseline:
/// `(1) Name: definition` per line, the definition's first letter lowercased
/// to read as a clause.
pub fn aspect_definitions_block(domain: &DomainConfig) -> String {
    domain
        .aspects
        .iter()
        .enumerate()
        .map(|(i, aspect)| {
            let mut chars = aspect.definition.chars();
            let definition = match chars.next() {
                Some(first) => first.to_lowercase().collect::<String>() + chars.as_str(),
                None => String::new(),
            };
            format!("({}) {}: {}", i + 1, aspect.name, definition)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn call_once(
    backend: &dyn Backend,
    params: &GenerationParams,
    prompt: &RenderedPrompt,
    run_index: u32,
    label: &str,
) -> Result<BaselineCall, PipelineError> {
    let request = params.request(prompt, run_index);
    let completion = params.enforce_truncation(backend.complete(&request)?)?;
    Ok(BaselineCall {
        label: label.to_string(),
        prompt_digest: prompt.bindings_digest.clone(),
        output: completion.text,
        finish_reason: completion.finish_reason,
        prompt_tokens: completion.usage.prompt_tokens,
        output_tokens: completion.usage.output_tokens,
    })
}

fn wording_candidates(domain: &DomainConfig) -> BTreeMap<String, String> {
    BTreeMap::from([("topic_phrase".to_string(), domain.wording().topic_phrase)])
}

fn finish(
    system: SystemKind,
    entity: &Entity,
    domain: &DomainConfig,
    run_index: u32,
    calls: Vec<BaselineCall>,
    steps: Option<Vec<String>>,
) -> PipelineRun {
    let text = calls.last().map(|c| c.output.clone()).unwrap_or_default();
    let mut trace = RunTrace::skeleton(system, entity, domain, run_index);
    trace.steps = steps;
    trace.baseline_calls = Some(calls);
    trace.meta_review = text.clone();
    PipelineRun {
        meta_review: MetaReview {
            entity_id: entity.entity_id.clone(),
            system,
            run_index,
            text,
        },
        trace,
    }
}

/// One call carrying all reviews and all aspect definitions. Oversized
/// inputs surface as `ContextLengthExceeded` from the backend — this
/// baseline has no way to shrink its prompt.
pub fn run_naive_aspect_prompting(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    entity: &Entity,
    params: &GenerationParams,
    run_index: u32,
) -> Result<PipelineRun, PipelineError> {
    let template = registry.lookup(Stage::Naive, None, &domain.domain_id)?;
    let mut candidates = wording_candidates(domain);
    candidates.insert("aspect_definitions".into(), aspect_definitions_block(domain));
    candidates.insert("source_documents".into(), concat_reviews(entity));
    let prompt = render_filtered(template, candidates)?;
    let call = call_once(backend, params, &prompt, run_index, "naive")?;
    Ok(finish(SystemKind::Naive, entity, domain, run_index, vec![call], None))
}

/// Summarizes each chunk, then aggregates the chunk summaries; `#chunks + 1`
/// calls total.
pub fn run_chunkwise(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    entity: &Entity,
    params: &GenerationParams,
    run_index: u32,
    concurrency: usize,
) -> Result<PipelineRun, PipelineError> {
    let chunks = chunk_reviews(entity, domain.chunk_policy);
    let template = registry.lookup(Stage::ChunkSummarize, None, &domain.domain_id)?;
    let outcomes = fan_out(
        chunks.into_iter().enumerate().collect(),
        concurrency,
        |(i, chunk)| {
            let mut candidates = wording_candidates(domain);
            candidates.insert("the_text_chunk".into(), chunk.text);
            let prompt = render_filtered(template, candidates)?;
            call_once(backend, params, &prompt, run_index, &format!("chunk_{}", i + 1))
        },
    );
    let mut calls = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    let summaries = calls
        .iter()
        .map(|c| c.output.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let aggregate_template = registry.lookup(Stage::ChunkAggregate, None, &domain.domain_id)?;
    let prompt = render_filtered(
        aggregate_template,
        BTreeMap::from([("chunk_summaries".to_string(), summaries)]),
    )?;
    calls.push(call_once(backend, params, &prompt, run_index, "aggregate")?);
    Ok(finish(SystemKind::Chunkwise, entity, domain, run_index, calls, None))
}

/// Step lines from the elicitation output: list markers stripped, blanks
/// dropped. No sentinel convention exists for steps.
pub fn parse_step_list(raw: &str) -> Vec<String> {
    raw.lines()
        .map(|line| {
            let line = line.trim();
            for bullet in ["- ", "* ", "• "] {
                if let Some(rest) = line.strip_prefix(bullet) {
                    return rest.trim_start();
                }
            }
            let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits > 0 {
                if let Some(rest) = line[digits..]
                    .strip_prefix(". ")
                    .or_else(|| line[digits..].strip_prefix(") "))
                {
                    return rest.trim_start();
                }
            }
            line
        })
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect()
}

/// Asks the model for its own step list, then executes the steps in order.
/// Step 1 sees the concatenated source reviews as "previous output"; each
/// later step sees its predecessor's output. `1 + #steps` calls, strictly
/// sequential — there is nothing to parallelize in a chain.
pub fn run_automatic_decomposition(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    entity: &Entity,
    params: &GenerationParams,
    run_index: u32,
) -> Result<PipelineRun, PipelineError> {
    let steps_template = registry.lookup(Stage::AutoSteps, None, &domain.domain_id)?;
    let mut candidates = wording_candidates(domain);
    candidates.insert("source_text".into(), concat_reviews(entity));
    let prompt = render_filtered(steps_template, candidates)?;
    let elicitation = call_once(backend, params, &prompt, run_index, "steps")?;
    let steps = parse_step_list(&elicitation.output);
    if steps.is_empty() {
        return Err(PipelineError::EmptyStepList);
    }
    let mut calls = vec![elicitation];
    let follow_template = registry.lookup(Stage::AutoFollow, None, &domain.domain_id)?;
    let mut previous = concat_reviews(entity);
    for (i, step) in steps.iter().enumerate() {
        let prompt = render_filtered(
            follow_template,
            BTreeMap::from([
                ("output_from_last_step".to_string(), previous),
                ("current_step".to_string(), step.clone()),
            ]),
        )?;
        let call = call_once(backend, params, &prompt, run_index, &format!("step_{}", i + 1))?;
        previous = call.output.clone();
        calls.push(call);
    }
    Ok(finish(
        SystemKind::Autodecomp,
        entity,
        domain,
        run_index,
        calls,
        Some(steps),
    ))
}
