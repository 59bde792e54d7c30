//! Offline backend that computes completions from the prompt text alone.
//!
//! Each stage's prompt template carries a distinctive instruction line; the
//! mock recognizes the stage from that line, re-parses the material the
//! template embedded, and produces output by fixed rules (keyword-matched
//! sentences for identification, mechanical joins for the summary stages).
//! The whole backend is a pure function of the request, so pipelines built
//! on it are reproducible byte for byte.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::{Backend, BackendError, CacheKey, Completion, FinishReason, PromptRequest, Usage};
use crate::prompts::Stage;

/// Instruction lines that identify each stage's template. Checked in order;
/// the templates are written so at most one matches any rendered prompt.
const STAGE_MARKERS: &[(Stage, &str)] = &[
    (Stage::AspectId, "please extract fragments that are related to"),
    (Stage::Consolidation, "Target input review fragments:"),
    (Stage::Synthesis, "please write a concise and natural meta-review"),
    (Stage::Naive, "focused on the review aspects below"),
    (Stage::AutoSteps, "sequential steps to write a summary"),
    (
        Stage::AutoFollow,
        "Please follow the instruction below and give your output.",
    ),
    (
        Stage::ChunkSummarize,
        "Please write a summary for the following review on",
    ),
    (
        Stage::ChunkAggregate,
        "Please write a summary for the following texts.",
    ),
    (Stage::Geval, "percentage of faithful opinions"),
];

pub fn detect_stage(user_text: &str) -> Option<Stage> {
    STAGE_MARKERS
        .iter()
        .find(|(_, marker)| user_text.contains(marker))
        .map(|(stage, _)| *stage)
}

/// One successful completion, as seen by the mock.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub stage: Stage,
    pub run_index: u32,
    pub key: String,
}

#[derive(Default)]
pub struct MockBackend {
    /// Keyword lists keyed by lowercase aspect name; an unregistered aspect
    /// matches its own lowercase name.
    keywords: BTreeMap<String, Vec<String>>,
    scripts: Mutex<BTreeMap<Stage, String>>,
    max_prompt_chars: Option<usize>,
    delay: Option<Duration>,
    log: Mutex<Vec<CallRecord>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_keywords<I, S>(&mut self, aspect_name: &str, keywords: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.keywords.insert(
            aspect_name.to_lowercase(),
            keywords
                .into_iter()
                .map(|k| k.into().to_lowercase())
                .collect(),
        );
    }

    /// Pins the output of one stage, overriding the computed rule.
    pub fn script(&self, stage: Stage, output: &str) {
        self.scripts
            .lock()
            .unwrap()
            .insert(stage, output.to_string());
    }

    /// Prompts longer than `limit` characters fail with
    /// `ContextLengthExceeded`, mimicking a bounded context window.
    pub fn set_max_prompt_chars(&mut self, limit: usize) {
        self.max_prompt_chars = Some(limit);
    }

    /// Makes every call take at least `delay`, so concurrency is observable.
    pub fn set_delay(&mut self, delay: Duration) {
        self.delay = Some(delay);
    }

    pub fn calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn calls_for(&self, stage: Stage) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.stage == stage)
            .count()
    }

    pub fn log_snapshot(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        self.log.lock().unwrap().clear();
        self.max_in_flight.store(0, Ordering::SeqCst);
    }

    fn keywords_for(&self, aspect_name: &str) -> Vec<String> {
        let key = aspect_name.to_lowercase();
        self.keywords
            .get(&key)
            .cloned()
            .unwrap_or_else(|| vec![key])
    }

    fn respond(&self, stage: Stage, user_text: &str) -> Result<String, BackendError> {
        if let Some(scripted) = self.scripts.lock().unwrap().get(&stage) {
            return Ok(scripted.clone());
        }
        let malformed = || BackendError::Protocol {
            reason: format!("mock cannot parse a {stage} prompt it recognized"),
        };
        Ok(match stage {
            Stage::AspectId => {
                let aspect = aspect_name(user_text).ok_or_else(malformed)?;
                let review = between(user_text, "Target input review:", "Final extracted fragments")
                    .ok_or_else(malformed)?;
                let keywords = self.keywords_for(aspect);
                let matched: Vec<&str> = split_sentences(review)
                    .into_iter()
                    .filter(|s| {
                        let lower = s.to_lowercase();
                        keywords.iter().any(|k| lower.contains(k))
                    })
                    .collect();
                if matched.is_empty() {
                    "No related fragments".to_string()
                } else {
                    matched.join("\n")
                }
            }
            Stage::Consolidation => {
                let fragments =
                    between(user_text, "Target input review fragments:", "The final summary")
                        .ok_or_else(malformed)?;
                let joined = fragments.lines().collect::<Vec<_>>().join(" ");
                format!("Summary: {joined}")
            }
            Stage::Synthesis => {
                let blocks = between(user_text, "Comments on different aspects:", "The meta-review is")
                    .ok_or_else(malformed)?;
                blocks
                    .split("\n\n")
                    .map(|block| {
                        let body = block.split_once(": ").map_or(block, |(_, rest)| rest);
                        body.replace('\n', " ")
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            }
            Stage::Naive => {
                let reviews = between(user_text, "Reviews on ", "The output summary:")
                    .ok_or_else(malformed)?;
                first_sentences(reviews)
            }
            Stage::AutoSteps => "1. Read all reviews carefully.\n\
                                 2. Identify the main opinions.\n\
                                 3. Write a concise summary."
                .to_string(),
            Stage::AutoFollow => {
                let marker = "Please follow the instruction below and give your output.";
                let prev = user_text.split(marker).next().ok_or_else(malformed)?.trim();
                let step = between(user_text, marker, "The output:").ok_or_else(malformed)?;
                format!("did: {step} (given {} chars)", prev.chars().count())
            }
            Stage::ChunkSummarize => {
                let chunk = inline_between(user_text, "The review: ", "The output summary:")
                    .ok_or_else(malformed)?;
                first_sentences(chunk)
            }
            Stage::ChunkAggregate => {
                let summaries =
                    between(user_text, "The texts to be summarized:", "The output summary:")
                        .ok_or_else(malformed)?;
                summaries.lines().collect::<Vec<_>>().join(" ")
            }
            Stage::Geval => "0.50".to_string(),
        })
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &PromptRequest) -> Result<Completion, BackendError> {
        let _gauge = Gauge::enter(self);
        if let Some(delay) = self.delay {
            std::thread::sleep(delay);
        }
        if let Some(limit) = self.max_prompt_chars {
            if request.user_text.chars().count() > limit {
                return Err(BackendError::ContextLengthExceeded);
            }
        }
        let stage = detect_stage(&request.user_text).ok_or(BackendError::UnknownStageMarker)?;
        let text = self.respond(stage, &request.user_text)?;
        self.log.lock().unwrap().push(CallRecord {
            stage,
            run_index: request.run_index,
            key: CacheKey::from_request(request).0,
        });
        Ok(Completion {
            usage: Usage {
                prompt_tokens: request.user_text.split_whitespace().count() as u32,
                output_tokens: text.split_whitespace().count() as u32,
            },
            text,
            finish_reason: FinishReason::Stop,
            from_cache: false,
        })
    }

    fn id(&self) -> &str {
        "mock"
    }
}

struct Gauge<'a>(&'a MockBackend);

impl<'a> Gauge<'a> {
    fn enter(backend: &'a MockBackend) -> Self {
        let now = backend.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        backend.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Gauge(backend)
    }
}

impl Drop for Gauge<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// The aspect under discussion, read back off the identification prompt's
/// "... related to {aspect} of {target}" instruction line.
fn aspect_name(user_text: &str) -> Option<&str> {
    let after = user_text.split("related to ").nth(1)?;
    after.split(" of ").next()
}

/// Byte offset of the start of the first line beginning with `prefix`.
fn line_offset(text: &str, prefix: &str) -> Option<usize> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.starts_with(prefix) {
            return Some(offset);
        }
        offset += line.len();
    }
    None
}

/// Content between the line starting with `start_prefix` (exclusive) and the
/// next line starting with `end_prefix` (exclusive; end of text if absent).
fn between<'a>(text: &'a str, start_prefix: &str, end_prefix: &str) -> Option<&'a str> {
    let start_line = line_offset(text, start_prefix)?;
    let after_line = text[start_line..]
        .find('\n')
        .map_or(text.len(), |i| start_line + i + 1);
    let rest = &text[after_line..];
    let end = line_offset(rest, end_prefix).unwrap_or(rest.len());
    Some(rest[..end].trim())
}

/// Like `between`, but the content starts on the same line as the prefix.
fn inline_between<'a>(text: &'a str, start_prefix: &str, end_prefix: &str) -> Option<&'a str> {
    let start_line = line_offset(text, start_prefix)?;
    let content_start = start_line + start_prefix.len();
    let rest = &text[content_start..];
    let end = line_offset(rest, end_prefix).unwrap_or(rest.len());
    Some(rest[..end].trim())
}

/// Sentence slices of `text`: boundaries fall after `.`, `!` or `?` followed
/// by whitespace. Each slice is trimmed but otherwise an exact substring of
/// the input, so extracted fragments ground verbatim in their source review.
fn split_sentences(text: &str) -> Vec<&str> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars
                .peek()
                .is_none_or(|(_, next)| next.is_whitespace());
            if at_boundary {
                let slice = text[start..=i].trim();
                if !slice.is_empty() {
                    sentences.push(slice);
                }
                start = i + c.len_utf8();
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail);
    }
    sentences
}

/// First sentence of each blank-line-separated block, joined by spaces. A
/// leading "Review N:" label line is not part of the content.
fn first_sentences(text: &str) -> String {
    text.split("\n\n")
        .filter_map(|block| {
            let block = block
                .lines()
                .skip_while(|l| l.starts_with("Review ") && l.trim_end().ends_with(':'))
                .collect::<Vec<_>>()
                .join("\n");
            split_sentences(&block).first().map(|s| s.to_string())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DomainConfig;
    use crate::prompts::{
        assemble_aspect_id_prompt, assemble_consolidation_prompt, assemble_synthesis_prompt,
        TemplateRegistry,
    };
    use std::path::PathBuf;

    fn synthetic_domain() -> DomainConfig {
        let path =
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/domains/synthetic.json");
        DomainConfig::from_path(&path).unwrap()
    }

    fn request(prompt: &crate::prompts::RenderedPrompt) -> PromptRequest {
        PromptRequest {
            model_id: "mock".into(),
            system_text: prompt.system.clone(),
            user_text: prompt.text.clone(),
            temperature: 0.7,
            max_output_tokens: 256,
            run_index: 0,
        }
    }

    #[test]
    fn identification_returns_keyword_sentences_verbatim() {
        let registry = TemplateRegistry::builtin();
        let domain = synthetic_domain();
        let mut mock = MockBackend::new();
        mock.register_keywords("Clarity", ["unclear", "writing"]);
        let review = "The method is strong. The writing is hard to follow. Results look fine.";
        let prompt = assemble_aspect_id_prompt(
            &registry,
            &domain,
            domain.aspect("clarity").unwrap(),
            review,
        )
        .unwrap();
        let completion = mock.complete(&request(&prompt)).unwrap();
        assert_eq!(completion.text, "The writing is hard to follow.");
        assert!(review.contains(&completion.text));
    }

    #[test]
    fn identification_without_matches_yields_the_sentinel() {
        let registry = TemplateRegistry::builtin();
        let domain = synthetic_domain();
        let mock = MockBackend::new();
        // Unregistered aspect falls back to its lowercase name, absent here.
        let prompt = assemble_aspect_id_prompt(
            &registry,
            &domain,
            domain.aspect("novelty").unwrap(),
            "The experiments are thorough.",
        )
        .unwrap();
        let completion = mock.complete(&request(&prompt)).unwrap();
        assert_eq!(completion.text, "No related fragments");
    }

    #[test]
    fn consolidation_and_synthesis_join_mechanically() {
        let registry = TemplateRegistry::builtin();
        let domain = synthetic_domain();
        let mock = MockBackend::new();
        let fragments = vec!["the writing is poor".to_string(), "figures unclear".to_string()];
        let prompt = assemble_consolidation_prompt(&registry, &domain, &fragments).unwrap();
        let completion = mock.complete(&request(&prompt)).unwrap();
        assert_eq!(completion.text, "Summary: the writing is poor figures unclear");

        let blocks = vec![
            ("Clarity".to_string(), "Summary: poor writing".to_string()),
            ("Novelty".to_string(), "Summary: not new".to_string()),
        ];
        let prompt = assemble_synthesis_prompt(&registry, &domain, &blocks).unwrap();
        let completion = mock.complete(&request(&prompt)).unwrap();
        assert_eq!(completion.text, "Summary: poor writing Summary: not new");
    }

    #[test]
    fn unknown_prompts_are_rejected() {
        let mock = MockBackend::new();
        let req = PromptRequest {
            model_id: "mock".into(),
            system_text: None,
            user_text: "Tell me a story.".into(),
            temperature: 0.7,
            max_output_tokens: 16,
            run_index: 0,
        };
        assert!(matches!(
            mock.complete(&req),
            Err(BackendError::UnknownStageMarker)
        ));
    }

    #[test]
    fn scripted_output_wins_and_calls_are_logged() {
        let registry = TemplateRegistry::builtin();
        let domain = synthetic_domain();
        let mock = MockBackend::new();
        mock.script(Stage::Consolidation, "pinned");
        let prompt =
            assemble_consolidation_prompt(&registry, &domain, &["frag".to_string()]).unwrap();
        let mut req = request(&prompt);
        req.run_index = 2;
        let completion = mock.complete(&req).unwrap();
        assert_eq!(completion.text, "pinned");
        assert_eq!(mock.calls(), 1);
        assert_eq!(mock.calls_for(Stage::Consolidation), 1);
        let log = mock.log_snapshot();
        assert_eq!(log[0].run_index, 2);
        assert_eq!(log[0].key, CacheKey::from_request(&req).0);
    }

    #[test]
    fn oversized_prompts_hit_the_context_limit() {
        let mut mock = MockBackend::new();
        mock.set_max_prompt_chars(10);
        let req = PromptRequest {
            model_id: "mock".into(),
            system_text: None,
            user_text: "x".repeat(11),
            temperature: 0.7,
            max_output_tokens: 16,
            run_index: 0,
        };
        assert!(matches!(
            mock.complete(&req),
            Err(BackendError::ContextLengthExceeded)
        ));
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn sentence_splitting_keeps_exact_substrings() {
        let text = "First one. Second!  Third? trailing bit";
        let sentences = split_sentences(text);
        assert_eq!(sentences, vec!["First one.", "Second!", "Third?", "trailing bit"]);
        for s in sentences {
            assert!(text.contains(s));
        }
        // "3.5" must not split mid-number.
        assert_eq!(split_sentences("Score is 3.5 overall."), vec!["Score is 3.5 overall."]);
    }
}
