//! Prompt templates and their assembly into stage-specific requests.
//!
//! Templates are plain text files: a short `key: value` header (id, stage,
//! optional style and system line, required placeholder names), a `---`
//! separator, and the body. Placeholders are written `{name}` and filled in a
//! single pass — substituted values are never re-scanned, so review text
//! containing braces cannot inject further expansion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{AspectDefinition, DomainConfig, PromptStyle};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no template for stage {stage} (style {style:?}) in domain {domain} or default")]
    TemplateNotFound {
        stage: Stage,
        style: Option<PromptStyle>,
        domain: String,
    },
    #[error("template {template}: no binding for placeholder {name}")]
    MissingPlaceholder { template: String, name: String },
    #[error("template {template}: binding {name} matches no placeholder")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {path}: {message}")]
    Parse { path: String, message: String },
    #[error("cannot consolidate an empty fragment cluster")]
    EmptyCluster,
    #[error("cannot synthesize a meta-review from zero aspect summaries")]
    EmptySummaries,
    #[error("aspect {aspect_id} is not declared by domain {domain_id}")]
    AspectNotInDomain { aspect_id: String, domain_id: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Every distinct kind of model call the system issues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AspectId,
    Consolidation,
    Synthesis,
    Naive,
    AutoSteps,
    AutoFollow,
    ChunkSummarize,
    ChunkAggregate,
    Geval,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::AspectId => "aspect_id",
            Stage::Consolidation => "consolidation",
            Stage::Synthesis => "synthesis",
            Stage::Naive => "naive",
            Stage::AutoSteps => "auto_steps",
            Stage::AutoFollow => "auto_follow",
            Stage::ChunkSummarize => "chunk_summarize",
            Stage::ChunkAggregate => "chunk_aggregate",
            Stage::Geval => "geval",
        }
    }

    pub fn from_str(s: &str) -> Option<Stage> {
        Some(match s {
            "aspect_id" => Stage::AspectId,
            "consolidation" => Stage::Consolidation,
            "synthesis" => Stage::Synthesis,
            "naive" => Stage::Naive,
            "auto_steps" => Stage::AutoSteps,
            "auto_follow" => Stage::AutoFollow,
            "chunk_summarize" => Stage::ChunkSummarize,
            "chunk_aggregate" => Stage::ChunkAggregate,
            "geval" => Stage::Geval,
            _ => return None,
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: String,
    pub stage: Stage,
    pub style: Option<PromptStyle>,
    pub system: Option<String>,
    pub body: String,
    pub requires: BTreeSet<String>,
}

impl PromptTemplate {
    /// Domain the template belongs to: the path segment before the first `/`
    /// of its id ("default" when the id has no segment).
    pub fn domain_key(&self) -> &str {
        self.id.split_once('/').map_or("default", |(d, _)| d)
    }
}

fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn scan_placeholders(text: &str, found: &mut BTreeSet<String>) {
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        rest = &rest[open + 1..];
        if let Some(close) = rest.find('}') {
            let name = &rest[..close];
            if is_placeholder_name(name) {
                found.insert(name.to_string());
                rest = &rest[close + 1..];
            }
        } else {
            break;
        }
    }
}

/// Parses one template file. `origin` only labels error messages.
pub fn parse_template(text: &str, origin: &str) -> Result<PromptTemplate, PromptError> {
    let parse_err = |message: String| PromptError::Parse {
        path: origin.to_string(),
        message,
    };
    let mut id = None;
    let mut stage = None;
    let mut style = None;
    let mut system = None;
    let mut requires = BTreeSet::new();
    let mut lines = text.lines();
    let mut saw_separator = false;
    let mut header_lines = 0usize;
    for line in lines.by_ref() {
        header_lines += 1;
        if line.trim() == "---" {
            saw_separator = true;
            break;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| parse_err(format!("malformed header line: {line:?}")))?;
        let value = value.trim();
        match key.trim() {
            "id" => id = Some(value.to_string()),
            "stage" => {
                stage = Some(
                    Stage::from_str(value)
                        .ok_or_else(|| parse_err(format!("unknown stage {value:?}")))?,
                )
            }
            "style" => {
                style = Some(match value {
                    "few_shot" => PromptStyle::FewShot,
                    "zero_shot" => PromptStyle::ZeroShot,
                    other => return Err(parse_err(format!("unknown style {other:?}"))),
                })
            }
            "system" => system = Some(value.to_string()),
            "requires" => {
                requires = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            other => return Err(parse_err(format!("unknown header key {other:?}"))),
        }
    }
    if !saw_separator {
        return Err(parse_err("missing --- separator".into()));
    }
    // Rebuild the body from the raw text to keep internal blank lines; the
    // file's final newline is not part of the prompt.
    let body_start: usize = text
        .split_inclusive('\n')
        .take(header_lines)
        .map(str::len)
        .sum();
    let body = text[body_start..]
        .strip_suffix('\n')
        .unwrap_or(&text[body_start..])
        .to_string();
    let template = PromptTemplate {
        id: id.ok_or_else(|| parse_err("missing id header".into()))?,
        stage: stage.ok_or_else(|| parse_err("missing stage header".into()))?,
        style,
        system,
        body,
        requires,
    };
    let mut scanned = BTreeSet::new();
    scan_placeholders(&template.body, &mut scanned);
    if let Some(system) = &template.system {
        scan_placeholders(system, &mut scanned);
    }
    if scanned != template.requires {
        return Err(parse_err(format!(
            "requires header {:?} does not match placeholders {:?} found in the template",
            template.requires, scanned
        )));
    }
    Ok(template)
}

/// A prompt rendered from a template, ready to send to a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub system: Option<String>,
    pub template_id: String,
    pub stage: Stage,
    /// SHA-256 over the template id and the sorted bindings; identifies what
    /// was asked without storing the full prompt in traces.
    pub bindings_digest: String,
}

fn digest_bindings(template_id: &str, bindings: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((template_id.len() as u64).to_le_bytes());
    hasher.update(template_id.as_bytes());
    for (key, value) in bindings {
        hasher.update((key.len() as u64).to_le_bytes());
        hasher.update(key.as_bytes());
        hasher.update((value.len() as u64).to_le_bytes());
        hasher.update(value.as_bytes());
    }
    hex::encode(hasher.finalize())
}

fn substitute(
    template_id: &str,
    text: &str,
    bindings: &BTreeMap<String, String>,
    used: &mut BTreeSet<String>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(after_brace) = rest.strip_prefix('{') {
            if let Some(close) = after_brace.find('}') {
                let name = &after_brace[..close];
                if is_placeholder_name(name) {
                    let value =
                        bindings
                            .get(name)
                            .ok_or_else(|| PromptError::MissingPlaceholder {
                                template: template_id.to_string(),
                                name: name.to_string(),
                            })?;
                    out.push_str(value);
                    used.insert(name.to_string());
                    rest = &after_brace[close + 1..];
                    continue;
                }
            }
        }
        let ch = rest.chars().next().unwrap();
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    Ok(out)
}

/// Fills a template's placeholders. Every placeholder must have a binding and
/// every binding must be consumed; both directions error rather than silently
/// producing a prompt that differs from what the caller intended.
pub fn render(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, PromptError> {
    let mut used = BTreeSet::new();
    let text = substitute(&template.id, &template.body, bindings, &mut used)?;
    let system = template
        .system
        .as_ref()
        .map(|s| substitute(&template.id, s, bindings, &mut used))
        .transpose()?;
    if let Some(name) = bindings.keys().find(|k| !used.contains(*k)) {
        return Err(PromptError::UnknownPlaceholder {
            template: template.id.clone(),
            name: name.clone(),
        });
    }
    Ok(RenderedPrompt {
        text,
        system,
        template_id: template.id.clone(),
        stage: template.stage,
        bindings_digest: digest_bindings(&template.id, bindings),
    })
}

/// Looks templates up by (stage, style, domain), falling back to the shared
/// `default` domain when the domain has no override.
#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: BTreeMap<(Stage, Option<PromptStyle>, String), PromptTemplate>,
}

macro_rules! builtin_templates {
    ($($path:literal),+ $(,)?) => {
        [$((
            $path,
            include_str!(concat!("../assets/templates/", $path)),
        )),+]
    };
}

impl TemplateRegistry {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        let files = builtin_templates![
            "default/aspect_id.few_shot.txt",
            "default/aspect_id.zero_shot.txt",
            "default/auto_follow.txt",
            "default/auto_steps.txt",
            "default/chunk_aggregate.txt",
            "default/chunk_summarize.txt",
            "default/consolidation.few_shot.txt",
            "default/consolidation.zero_shot.txt",
            "default/geval.txt",
            "default/naive.txt",
            "default/synthesis.txt",
            "hotels/consolidation.zero_shot.txt",
            "hotels/synthesis.txt",
            "scientific/auto_steps.txt",
            "scientific/chunk_summarize.txt",
            "scientific/naive.txt",
            "shoes/consolidation.zero_shot.txt",
            "shoes/synthesis.txt",
        ];
        let mut registry = TemplateRegistry::default();
        for (path, text) in files {
            let template =
                parse_template(text, path).expect("builtin templates must parse");
            registry.insert(template);
        }
        registry
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        let key = (
            template.stage,
            template.style,
            template.domain_key().to_string(),
        );
        self.templates.insert(key, template);
    }

    /// Loads every `*.txt` file under `dir` (recursively) on top of the
    /// current contents, overriding same-keyed templates.
    pub fn load_dir(&mut self, dir: &Path) -> Result<(), PromptError> {
        let entries = fs::read_dir(dir).map_err(|source| PromptError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| PromptError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let path = entry.path();
            if path.is_dir() {
                self.load_dir(&path)?;
            } else if path.extension().is_some_and(|e| e == "txt") {
                let text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                self.insert(parse_template(&text, &path.display().to_string())?);
            }
        }
        Ok(())
    }

    pub fn lookup(
        &self,
        stage: Stage,
        style: Option<PromptStyle>,
        domain_id: &str,
    ) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&(stage, style, domain_id.to_string()))
            .or_else(|| self.templates.get(&(stage, style, "default".to_string())))
            .ok_or_else(|| PromptError::TemplateNotFound {
                stage,
                style,
                domain: domain_id.to_string(),
            })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

fn wording_bindings(domain: &DomainConfig) -> BTreeMap<String, String> {
    let wording = domain.wording();
    BTreeMap::from([
        ("domain".to_string(), wording.adjective),
        ("review_kind".to_string(), wording.review_kind),
        ("entity_phrase".to_string(), wording.entity_phrase),
        ("aspect_target".to_string(), wording.aspect_target),
        ("topic_phrase".to_string(), wording.topic_phrase),
    ])
}

/// Renders with a superset of bindings: candidates the template does not
/// declare are dropped first. This is how domain overrides can bake wording
/// into the text and require fewer placeholders than the default template.
pub fn render_filtered(
    template: &PromptTemplate,
    mut candidates: BTreeMap<String, String>,
) -> Result<RenderedPrompt, PromptError> {
    candidates.retain(|k, _| template.requires.contains(k));
    render(template, &candidates)
}

/// The identification prompt asking which fragments of one review discuss one
/// aspect.
pub fn assemble_aspect_id_prompt(
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    aspect: &AspectDefinition,
    review_text: &str,
) -> Result<RenderedPrompt, PromptError> {
    let template = registry.lookup(
        Stage::AspectId,
        Some(domain.identification_style),
        &domain.domain_id,
    )?;
    let mut candidates = wording_bindings(domain);
    candidates.insert("aspect".into(), aspect.name.clone());
    candidates.insert("definition".into(), aspect.definition.clone());
    candidates.insert("input_document".into(), review_text.to_string());
    if let Some(example) = aspect.few_shot_examples.as_ref().and_then(|e| e.first()) {
        candidates.insert("example_input".into(), example.input.clone());
        candidates.insert("example_output".into(), example.output.clone());
    }
    render_filtered(template, candidates)
}

/// The consolidation prompt summarizing one aspect's fragment cluster.
/// Fragments appear one per line, in cluster order.
pub fn assemble_consolidation_prompt(
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    fragments: &[String],
) -> Result<RenderedPrompt, PromptError> {
    if fragments.is_empty() {
        return Err(PromptError::EmptyCluster);
    }
    let template = registry.lookup(
        Stage::Consolidation,
        Some(domain.consolidation_style),
        &domain.domain_id,
    )?;
    let mut candidates = wording_bindings(domain);
    candidates.insert("review_fragments".into(), fragments.join("\n"));
    if let Some(examples) = &domain.consolidation_examples {
        for (i, example) in examples.iter().enumerate().take(2) {
            candidates.insert(format!("example_fragments_{}", i + 1), example.input.clone());
            candidates.insert(format!("example_summary_{}", i + 1), example.output.clone());
        }
    }
    render_filtered(template, candidates)
}

/// Renders per-aspect texts as labeled blocks, the input format of the
/// synthesis stage: `Name: text`, blocks separated by a blank line.
pub fn synthesis_block_text(blocks: &[(String, String)]) -> String {
    blocks
        .iter()
        .map(|(name, text)| format!("{name}: {text}"))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The synthesis prompt combining the per-aspect blocks into one meta-review.
pub fn assemble_synthesis_prompt(
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    blocks: &[(String, String)],
) -> Result<RenderedPrompt, PromptError> {
    if blocks.is_empty() {
        return Err(PromptError::EmptySummaries);
    }
    let template = registry.lookup(Stage::Synthesis, None, &domain.domain_id)?;
    let mut candidates = wording_bindings(domain);
    candidates.insert("metas_generated".into(), synthesis_block_text(blocks));
    render_filtered(template, candidates)
}

/// Resolves an aspect id against the domain, with a stage-agnostic error.
pub fn aspect_or_err<'d>(
    domain: &'d DomainConfig,
    aspect_id: &str,
) -> Result<&'d AspectDefinition, PromptError> {
    domain
        .aspect(aspect_id)
        .ok_or_else(|| PromptError::AspectNotInDomain {
            aspect_id: aspect_id.to_string(),
            domain_id: domain.domain_id.clone(),
        })
}
