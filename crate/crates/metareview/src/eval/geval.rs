//! LLM-judged opinion faithfulness: the judge reads the source reviews and
//! the candidate summary and answers with the fraction of the summary's
//! opinions the sources support, as a decimal in [0, 1].

use std::collections::BTreeMap;

use crate::backend::{Backend, GenerationParams};
use crate::corpus::{DomainConfig, Entity};
use crate::prompts::{render_filtered, Stage, TemplateRegistry};

use super::EvalError;

/// Parse attempts before giving up; each attempt is a fresh sample under its
/// own run index, so retries draw new judge outputs instead of replaying the
/// cached unparsable one.
pub const GEVAL_ATTEMPTS: u32 = 3;

/// First decimal literal in the text, e.g. `0.85` out of "I'd rate it 0.85
/// overall". A bare leading dot (".85") is tolerated; a second dot ends the
/// number ("0.8.5" reads as 0.8).
pub fn parse_first_decimal(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let starts_number = bytes[i].is_ascii_digit()
            || (bytes[i] == b'.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit());
        if !starts_number {
            i += 1;
            continue;
        }
        let start = i;
        let mut seen_dot = bytes[i] == b'.';
        i += 1;
        while i < bytes.len() {
            if bytes[i].is_ascii_digit() {
                i += 1;
            } else if bytes[i] == b'.'
                && !seen_dot
                && i + 1 < bytes.len()
                && bytes[i + 1].is_ascii_digit()
            {
                seen_dot = true;
                i += 1;
            } else {
                break;
            }
        }
        let raw = &text[start..i];
        let normalized = if raw.starts_with('.') {
            format!("0{raw}")
        } else {
            raw.to_string()
        };
        return normalized.parse().ok();
    }
    None
}

/// Scores `summary` against the entity's source reviews. Accepts the first
/// judge output containing a decimal in [0, 1]; after `GEVAL_ATTEMPTS`
/// failures the last raw output is surfaced in the error.
pub fn geval_score(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    entity: &Entity,
    summary: &str,
    params: &GenerationParams,
) -> Result<f64, EvalError> {
    let template = registry.lookup(Stage::Geval, None, &domain.domain_id)?;
    let sources = crate::baselines::concat_reviews(entity);
    let mut candidates = BTreeMap::from([
        ("topic_phrase".to_string(), domain.wording().topic_phrase),
        ("source_documents".to_string(), sources),
        ("generation_summary".to_string(), summary.to_string()),
    ]);
    let prompt = render_filtered(template, std::mem::take(&mut candidates))?;
    let mut last_output = String::new();
    for attempt in 0..GEVAL_ATTEMPTS {
        let completion =
            params.enforce_truncation(backend.complete(&params.request(&prompt, attempt))?)?;
        if let Some(score) = parse_first_decimal(&completion.text) {
            if (0.0..=1.0).contains(&score) {
                return Ok(score);
            }
        }
        last_output = completion.text;
    }
    Err(EvalError::GevalParse {
        attempts: GEVAL_ATTEMPTS,
        last_output,
    })
}
