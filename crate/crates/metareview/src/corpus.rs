//! Review corpora and domain configuration.
//!
//! A corpus is a JSONL file with one entity per line; each entity carries the
//! reviews written about it, an optional reference meta-review, and optional
//! per-aspect gold fragment annotations. A domain config declares the review
//! aspects (with definitions and optional few-shot material) plus the wording
//! used to instantiate prompt templates for that domain.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("entity {entity_id}: {message}")]
    InvalidEntity { entity_id: String, message: String },
    #[error("entity {entity_id} belongs to domain {found}, expected {expected}")]
    DomainMismatch {
        entity_id: String,
        expected: String,
        found: String,
    },
    #[error("invalid domain config: {0}")]
    InvalidDomain(String),
    #[error("sampling fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    FewShot,
    ZeroShot,
}

/// How an entity's reviews are grouped into chunks by the chunk-wise baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkPolicy {
    PerReview,
    Fraction(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotExample {
    pub input: String,
    pub output: String,
}

/// Domain-specific noun phrases substituted into the shared prompt templates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainWording {
    /// Adjective in "documents with {adjective} review opinions".
    pub adjective: String,
    /// Kind of review in "Below is a {review_kind} review for ...".
    pub review_kind: String,
    /// Entity noun phrase with article, e.g. "an academic manuscript".
    pub entity_phrase: String,
    /// Target of "related to {aspect} of {aspect_target}".
    pub aspect_target: String,
    /// Phrase naming the reviewed subject in baseline and judge prompts.
    pub topic_phrase: String,
}

impl DomainWording {
    fn fallback(domain_id: &str, entity_noun: &str) -> Self {
        let article = match entity_noun.chars().next() {
            Some(c) if "aeiou".contains(c.to_ascii_lowercase()) => "an",
            _ => "a",
        };
        let phrase = format!("{article} {entity_noun}");
        DomainWording {
            adjective: domain_id.to_string(),
            review_kind: domain_id.to_string(),
            entity_phrase: phrase.clone(),
            aspect_target: format!("the {entity_noun}"),
            topic_phrase: phrase,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectDefinition {
    pub aspect_id: String,
    pub name: String,
    pub definition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub few_shot_examples: Option<Vec<FewShotExample>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainConfig {
    pub domain_id: String,
    pub entity_noun: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wording: Option<DomainWording>,
    pub identification_style: PromptStyle,
    pub consolidation_style: PromptStyle,
    #[serde(default = "default_chunk_policy")]
    pub chunk_policy: ChunkPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consolidation_examples: Option<Vec<FewShotExample>>,
    pub aspects: Vec<AspectDefinition>,
}

fn default_chunk_policy() -> ChunkPolicy {
    ChunkPolicy::PerReview
}

impl DomainConfig {
    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let mut config: DomainConfig = serde_json::from_str(text)
            .map_err(|e| CorpusError::InvalidDomain(e.to_string()))?;
        config.validate()?;
        if config.wording.is_none() {
            config.wording = Some(DomainWording::fallback(
                &config.domain_id,
                &config.entity_noun,
            ));
        }
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn wording(&self) -> DomainWording {
        self.wording
            .clone()
            .unwrap_or_else(|| DomainWording::fallback(&self.domain_id, &self.entity_noun))
    }

    pub fn aspect(&self, aspect_id: &str) -> Option<&AspectDefinition> {
        self.aspects.iter().find(|a| a.aspect_id == aspect_id)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: String| Err(CorpusError::InvalidDomain(message));
        if self.domain_id.trim().is_empty() {
            return invalid("domain_id must be non-empty".into());
        }
        if self.aspects.is_empty() {
            return invalid(format!("domain {} declares no aspects", self.domain_id));
        }
        let mut seen = BTreeSet::new();
        for aspect in &self.aspects {
            if aspect.aspect_id.trim().is_empty() || aspect.name.trim().is_empty() {
                return invalid(format!(
                    "domain {}: aspect ids and names must be non-empty",
                    self.domain_id
                ));
            }
            if !seen.insert(&aspect.aspect_id) {
                return invalid(format!(
                    "domain {}: duplicate aspect id {}",
                    self.domain_id, aspect.aspect_id
                ));
            }
            // Few-shot material must be present exactly when the stage is few-shot:
            // templates have fixed example slots, so the loader rejects mismatches
            // instead of silently dropping or fabricating examples.
            let examples = aspect.few_shot_examples.as_ref().map_or(0, Vec::len);
            match self.identification_style {
                PromptStyle::FewShot if examples != 1 => {
                    return invalid(format!(
                        "domain {}: aspect {} needs exactly one identification example \
                         under few-shot prompting, found {}",
                        self.domain_id, aspect.aspect_id, examples
                    ));
                }
                PromptStyle::ZeroShot if examples != 0 => {
                    return invalid(format!(
                        "domain {}: aspect {} carries identification examples \
                         but the identification stage is zero-shot",
                        self.domain_id, aspect.aspect_id
                    ));
                }
                _ => {}
            }
        }
        let consolidation = self.consolidation_examples.as_ref().map_or(0, Vec::len);
        match self.consolidation_style {
            PromptStyle::FewShot if consolidation != 2 => {
                return invalid(format!(
                    "domain {}: few-shot consolidation needs exactly two exemplars, found {}",
                    self.domain_id, consolidation
                ));
            }
            PromptStyle::ZeroShot if consolidation != 0 => {
                return invalid(format!(
                    "domain {}: consolidation exemplars present but the stage is zero-shot",
                    self.domain_id
                ));
            }
            _ => {}
        }
        if let ChunkPolicy::Fraction(fraction) = self.chunk_policy {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(CorpusError::InvalidFraction(fraction));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldFragment {
    pub review_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: String,
    pub domain_id: String,
    pub reviews: Vec<Review>,
    #[serde(default)]
    pub reference_meta_review: Option<String>,
    #[serde(default)]
    pub gold_fragments: Option<BTreeMap<String, Vec<GoldFragment>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub domain: DomainConfig,
    pub entities: Vec<Entity>,
    pub split: Split,
}

impl Corpus {
    pub fn entity(&self, entity_id: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.entity_id == entity_id)
    }
}

fn normalize_text(text: &str) -> String {
    text.nfc().collect::<String>().trim_end().to_string()
}

fn validate_entity(entity: &Entity, domain: &DomainConfig) -> Result<(), CorpusError> {
    let fail = |message: String| {
        Err(CorpusError::InvalidEntity {
            entity_id: entity.entity_id.clone(),
            message,
        })
    };
    if entity.entity_id.trim().is_empty() {
        return Err(CorpusError::InvalidEntity {
            entity_id: "<unnamed>".into(),
            message: "entity_id must be non-empty".into(),
        });
    }
    if entity.domain_id != domain.domain_id {
        return Err(CorpusError::DomainMismatch {
            entity_id: entity.entity_id.clone(),
            expected: domain.domain_id.clone(),
            found: entity.domain_id.clone(),
        });
    }
    if entity.reviews.is_empty() {
        return fail("entity has no reviews".into());
    }
    let mut ids = BTreeSet::new();
    for review in &entity.reviews {
        if review.review_id.trim().is_empty() {
            return fail("review ids must be non-empty".into());
        }
        if !ids.insert(&review.review_id) {
            return fail(format!("duplicate review id {}", review.review_id));
        }
        if review.text.is_empty() {
            return fail(format!("review {} has empty text", review.review_id));
        }
    }
    if let Some(gold) = &entity.gold_fragments {
        for (aspect_id, fragments) in gold {
            if domain.aspect(aspect_id).is_none() {
                return fail(format!("gold fragments reference unknown aspect {aspect_id}"));
            }
            for fragment in fragments {
                if !ids.contains(&fragment.review_id) {
                    return fail(format!(
                        "gold fragment for {aspect_id} references unknown review {}",
                        fragment.review_id
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Loads a JSONL corpus, rejecting the whole file on the first malformed line
/// or invariant violation — partially loaded corpora are never returned.
pub fn load_corpus(path: &Path, domain: &DomainConfig, split: Split) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut entities = Vec::new();
    let mut entity_ids = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut entity: Entity = serde_json::from_str(line).map_err(|e| CorpusError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        for review in &mut entity.reviews {
            review.text = normalize_text(&review.text);
        }
        if let Some(reference) = &mut entity.reference_meta_review {
            *reference = normalize_text(reference);
        }
        if let Some(gold) = &mut entity.gold_fragments {
            for fragments in gold.values_mut() {
                for fragment in fragments {
                    fragment.text = normalize_text(&fragment.text);
                }
            }
        }
        validate_entity(&entity, domain)?;
        if !entity_ids.insert(entity.entity_id.clone()) {
            return Err(CorpusError::Schema {
                line: line_no,
                message: format!("duplicate entity id {}", entity.entity_id),
            });
        }
        entities.push(entity);
    }
    Ok(Corpus {
        domain: domain.clone(),
        entities,
        split,
    })
}

/// Keeps `ceil(fraction * n)` reviews chosen uniformly without replacement.
/// Deterministic for a fixed seed; the surviving reviews keep their original
/// relative order.
pub fn sample_reviews(entity: &Entity, fraction: f64, seed: u64) -> Result<Entity, CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) || fraction.is_nan() {
        return Err(CorpusError::InvalidFraction(fraction));
    }
    let n = entity.reviews.len();
    let keep = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    if keep == n {
        return Ok(entity.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    indices.sort_unstable();
    let mut sampled = entity.clone();
    sampled.reviews = indices
        .into_iter()
        .map(|i| entity.reviews[i].clone())
        .collect();
    Ok(sampled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_domain() -> DomainConfig {
        DomainConfig::from_json(
            r#"{
                "domain_id": "synthetic",
                "entity_noun": "manuscript",
                "identification_style": "zero_shot",
                "consolidation_style": "zero_shot",
                "aspects": [
                    {"aspect_id": "clarity", "name": "Clarity", "definition": "Readability."}
                ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn wording_fallback_fills_article_and_phrases() {
        let domain = tiny_domain();
        let wording = domain.wording();
        assert_eq!(wording.entity_phrase, "a manuscript");
        assert_eq!(wording.aspect_target, "the manuscript");
        assert_eq!(wording.adjective, "synthetic");
    }

    #[test]
    fn few_shot_style_requires_examples() {
        let err = DomainConfig::from_json(
            r#"{
                "domain_id": "d",
                "entity_noun": "thing",
                "identification_style": "few_shot",
                "consolidation_style": "zero_shot",
                "aspects": [
                    {"aspect_id": "a", "name": "A", "definition": "x"}
                ]
            }"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("exactly one identification example"));
    }

    #[test]
    fn load_rejects_duplicate_review_ids() {
        let domain = tiny_domain();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            r#"{"entity_id":"e1","domain_id":"synthetic","reviews":[{"review_id":"r","text":"a"},{"review_id":"r","text":"b"}]}"#,
        )
        .unwrap();
        let err = load_corpus(&path, &domain, Split::Test).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidEntity { .. }));
    }

    #[test]
    fn load_normalizes_to_nfc_and_strips_trailing_whitespace() {
        let domain = tiny_domain();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        // "e" followed by a combining acute accent must come back as the
        // precomposed "é"; the trailing spaces must be gone.
        std::fs::write(
            &path,
            "{\"entity_id\":\"e1\",\"domain_id\":\"synthetic\",\"reviews\":[{\"review_id\":\"r\",\"text\":\"cafe\\u0301   \"}]}",
        )
        .unwrap();
        let corpus = load_corpus(&path, &domain, Split::Test).unwrap();
        assert_eq!(corpus.entities[0].reviews[0].text, "café");
    }

    #[test]
    fn sampling_is_deterministic_and_order_preserving() {
        let entity = Entity {
            entity_id: "e".into(),
            domain_id: "synthetic".into(),
            reviews: (0..10)
                .map(|i| Review {
                    review_id: format!("r{i}"),
                    text: format!("text {i}"),
                })
                .collect(),
            reference_meta_review: None,
            gold_fragments: None,
        };
        let a = sample_reviews(&entity, 0.3, 42).unwrap();
        let b = sample_reviews(&entity, 0.3, 42).unwrap();
        // ceil(0.3 * 10) = 3 reviews, same choice for the same seed.
        assert_eq!(a.reviews.len(), 3);
        let ids = |e: &Entity| e.reviews.iter().map(|r| r.review_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let positions: Vec<usize> = a
            .reviews
            .iter()
            .map(|r| entity.reviews.iter().position(|o| o.review_id == r.review_id).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        let c = sample_reviews(&entity, 0.3, 43).unwrap();
        assert_eq!(c.reviews.len(), 3);
    }

    #[test]
    fn sampling_rejects_bad_fractions() {
        let entity = Entity {
            entity_id: "e".into(),
            domain_id: "synthetic".into(),
            reviews: vec![Review {
                review_id: "r".into(),
                text: "t".into(),
            }],
            reference_meta_review: None,
            gold_fragments: None,
        };
        assert!(sample_reviews(&entity, 0.0, 1).is_err());
        assert!(sample_reviews(&entity, 1.2, 1).is_err());
        assert!(sample_reviews(&entity, f64::NAN, 1).is_err());
    }
}
