//! Model backends: the request/completion types, the `Backend` trait, plus
//! the deterministic mock, the HTTP remote, and the disk cache wrapper.

pub mod cache;
pub mod mock;
pub mod remote;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::{RenderedPrompt, Stage};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend {provider} unavailable: {reason}")]
    Unavailable { provider: String, reason: String },
    #[error("prompt exceeds the model's context window")]
    ContextLengthExceeded,
    #[error("authentication with {provider} failed")]
    Auth { provider: String },
    #[error("completion was truncated at the output-token limit")]
    Truncated,
    #[error("mock backend cannot infer a stage from the prompt")]
    UnknownStageMarker,
    #[error("protocol error: {reason}")]
    Protocol { reason: String },
    #[error("cache error: {reason}")]
    Cache { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

/// Everything that determines a completion. Two requests with equal fields
/// are the same request: they hit the same cache entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub model_id: String,
    pub system_text: Option<String>,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Which independent sample this is; distinct indices never share a cache
    /// entry, so re-running with the same index replays and a fresh index
    /// samples anew.
    pub run_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    /// Whether this completion was served from the disk cache. Runtime
    /// bookkeeping only — never persisted, so replayed artifacts stay
    /// byte-identical to the originals.
    #[serde(skip)]
    pub from_cache: bool,
}

/// Content address of a request: SHA-256 over its labeled, length-prefixed
/// fields, so no field boundary ambiguity and no separator collisions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn from_request(request: &PromptRequest) -> Self {
        let mut hasher = Sha256::new();
        let mut field = |label: &str, value: &[u8]| {
            hasher.update((label.len() as u64).to_le_bytes());
            hasher.update(label.as_bytes());
            hasher.update((value.len() as u64).to_le_bytes());
            hasher.update(value);
        };
        field("model_id", request.model_id.as_bytes());
        match &request.system_text {
            Some(text) => field("system_text", text.as_bytes()),
            None => field("system_text:none", b""),
        }
        field("user_text", request.user_text.as_bytes());
        field("temperature", &request.temperature.to_le_bytes());
        field("max_output_tokens", &request.max_output_tokens.to_le_bytes());
        field("run_index", &request.run_index.to_le_bytes());
        CacheKey(hex::encode(hasher.finalize()))
    }
}

/// Sampling settings shared by every call of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    /// Per-stage output budgets; stages not listed use `default_max_tokens`.
    #[serde(default)]
    pub max_output_tokens: BTreeMap<Stage, u32>,
    #[serde(default = "default_max_tokens")]
    pub default_max_tokens: u32,
    /// When false (the default), a completion cut off at the token limit is
    /// an error rather than silently partial output.
    #[serde(default)]
    pub accept_truncated: bool,
}

fn default_max_tokens() -> u32 {
    1024
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            model_id: "mock".into(),
            temperature: 0.7,
            max_output_tokens: BTreeMap::from([
                (Stage::AspectId, 1024),
                (Stage::Consolidation, 512),
                (Stage::Synthesis, 1024),
                (Stage::Geval, 64),
            ]),
            default_max_tokens: default_max_tokens(),
            accept_truncated: false,
        }
    }
}

impl GenerationParams {
    pub fn max_tokens_for(&self, stage: Stage) -> u32 {
        self.max_output_tokens
            .get(&stage)
            .copied()
            .unwrap_or(self.default_max_tokens)
    }

    /// Turns a rendered prompt into the request actually sent.
    pub fn request(&self, prompt: &RenderedPrompt, run_index: u32) -> PromptRequest {
        PromptRequest {
            model_id: self.model_id.clone(),
            system_text: prompt.system.clone(),
            user_text: prompt.text.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_tokens_for(prompt.stage),
            run_index,
        }
    }

    /// Applies the truncation policy to a finished completion.
    pub fn enforce_truncation(&self, completion: Completion) -> Result<Completion, BackendError> {
        if completion.finish_reason == FinishReason::Length && !self.accept_truncated {
            return Err(BackendError::Truncated);
        }
        Ok(completion)
    }
}

/// A completion source. Implementations are shared across worker threads, so
/// completing takes `&self`.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &PromptRequest) -> Result<Completion, BackendError>;
    /// Short name used in error messages and run manifests.
    fn id(&self) -> &str;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> PromptRequest {
        PromptRequest {
            model_id: "m".into(),
            system_text: Some("sys".into()),
            user_text: "user".into(),
            temperature: 0.7,
            max_output_tokens: 64,
            run_index: 0,
        }
    }

    #[test]
    fn cache_key_is_stable_and_sensitive_to_every_field() {
        let base = request();
        assert_eq!(
            CacheKey::from_request(&base),
            CacheKey::from_request(&base.clone())
        );
        let variants = [
            PromptRequest { model_id: "m2".into(), ..base.clone() },
            PromptRequest { system_text: None, ..base.clone() },
            PromptRequest { user_text: "other".into(), ..base.clone() },
            PromptRequest { temperature: 0.8, ..base.clone() },
            PromptRequest { max_output_tokens: 65, ..base.clone() },
            PromptRequest { run_index: 1, ..base.clone() },
        ];
        let key = CacheKey::from_request(&base);
        for variant in variants {
            assert_ne!(key, CacheKey::from_request(&variant));
        }
    }

    #[test]
    fn cache_key_distinguishes_empty_system_from_none() {
        let with_empty = PromptRequest {
            system_text: Some(String::new()),
            ..request()
        };
        let with_none = PromptRequest {
            system_text: None,
            ..request()
        };
        assert_ne!(
            CacheKey::from_request(&with_empty),
            CacheKey::from_request(&with_none)
        );
    }

    #[test]
    fn stage_budgets_fall_back_to_default() {
        let params = GenerationParams::default();
        assert_eq!(params.max_tokens_for(Stage::Consolidation), 512);
        assert_eq!(params.max_tokens_for(Stage::Geval), 64);
        assert_eq!(params.max_tokens_for(Stage::Naive), 1024);
    }

    #[test]
    fn truncation_is_an_error_unless_opted_in() {
        let completion = Completion {
            text: "partial".into(),
            finish_reason: FinishReason::Length,
            usage: Usage::default(),
            from_cache: false,
        };
        let strict = GenerationParams::default();
        assert!(matches!(
            strict.enforce_truncation(completion.clone()),
            Err(BackendError::Truncated)
        ));
        let lenient = GenerationParams {
            accept_truncated: true,
            ..GenerationParams::default()
        };
        assert_eq!(lenient.enforce_truncation(completion).unwrap().text, "partial");
    }
}
