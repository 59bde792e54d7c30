//! HTTP backend speaking the OpenAI-compatible chat-completions protocol,
//! which vLLM and llama.cpp servers also expose.

use std::time::Duration;

use rand::Rng;
use serde::Deserialize;

use super::{Backend, BackendError, Completion, FinishReason, PromptRequest, Usage};

/// Name of the environment variable read by default for the bearer token.
pub const DEFAULT_API_KEY_ENV: &str = "METAREVIEW_API_KEY";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Server base URL; `/v1/chat/completions` is appended (a trailing `/v1`
    /// on the base is tolerated).
    pub base_url: String,
    /// Environment variable holding the bearer token. Requests go out
    /// unauthenticated when the variable is unset, which suits local servers.
    pub api_key_env: String,
    /// Extra attempts after the first on 429/5xx/connect failures.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://127.0.0.1:8000".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            request_timeout: Duration::from_secs(120),
        }
    }
}

fn chat_url(base: &str) -> String {
    let trimmed = base.trim_end_matches('/');
    let trimmed = trimmed.strip_suffix("/v1").unwrap_or(trimmed);
    format!("{trimmed}/v1/chat/completions")
}

fn build_body(request: &PromptRequest) -> serde_json::Value {
    let mut messages = Vec::new();
    if let Some(system) = &request.system_text {
        messages.push(serde_json::json!({"role": "system", "content": system}));
    }
    messages.push(serde_json::json!({"role": "user", "content": request.user_text}));
    serde_json::json!({
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    })
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

fn looks_like_context_overflow(body: &str) -> bool {
    let lower = body.to_lowercase();
    ["context length", "context_length", "context window", "maximum context", "too many tokens"]
        .iter()
        .any(|marker| lower.contains(marker))
}

pub struct RemoteBackend {
    config: RemoteConfig,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .connect_timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| BackendError::Unavailable {
                provider: config.base_url.clone(),
                reason: e.to_string(),
            })?;
        Ok(RemoteBackend {
            url: chat_url(&config.base_url),
            api_key: std::env::var(&config.api_key_env).ok(),
            config,
            client,
        })
    }

    fn unavailable(&self, reason: String) -> BackendError {
        BackendError::Unavailable {
            provider: self.config.base_url.clone(),
            reason,
        }
    }

    /// One attempt. `Ok(Err(reason))` means "failed but worth retrying".
    fn attempt(
        &self,
        body: &serde_json::Value,
    ) -> Result<Result<Completion, String>, BackendError> {
        let mut builder = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = match builder.send() {
            Ok(response) => response,
            // Connection-level failures are transient by assumption.
            Err(e) => return Ok(Err(e.to_string())),
        };
        let status = response.status();
        let retry_after = response
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = response
            .text()
            .map_err(|e| self.unavailable(format!("reading response body: {e}")))?;
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(BackendError::Auth {
                provider: self.config.base_url.clone(),
            });
        }
        if status == reqwest::StatusCode::BAD_REQUEST && looks_like_context_overflow(&text) {
            return Err(BackendError::ContextLengthExceeded);
        }
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            let reason = format!("HTTP {status}");
            return Ok(Err(match retry_after {
                Some(after) => format!("{reason} (retry after {}s)", after.as_secs()),
                None => reason,
            }));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol {
                reason: format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| {
            BackendError::Protocol {
                reason: format!("malformed completion response: {e}"),
            }
        })?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol {
                reason: "response carried no choices".into(),
            })?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        let usage = parsed.usage.unwrap_or_default();
        Ok(Ok(Completion {
            text: choice.message.content,
            finish_reason,
            usage: Usage {
                prompt_tokens: usage.prompt_tokens,
                output_tokens: usage.completion_tokens,
            },
            from_cache: false,
        }))
    }

    fn backoff(&self, attempt: u32, retry_hint: Option<Duration>) -> Duration {
        let base = self.config.initial_backoff * 2u32.saturating_pow(attempt);
        let jitter = rand::thread_rng().gen_range(0..=base.as_millis().max(1) as u64 / 2);
        let computed = base + Duration::from_millis(jitter);
        retry_hint.map_or(computed, |hint| computed.max(hint))
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, request: &PromptRequest) -> Result<Completion, BackendError> {
        let body = build_body(request);
        let mut last_reason = String::new();
        for attempt in 0..=self.config.max_retries {
            match self.attempt(&body)? {
                Ok(completion) => return Ok(completion),
                Err(reason) => {
                    // Parse a server-sent wait out of the reason we recorded.
                    let hint = reason
                        .split("retry after ")
                        .nth(1)
                        .and_then(|s| s.trim_end_matches("s)").parse::<u64>().ok())
                        .map(Duration::from_secs);
                    last_reason = reason;
                    if attempt < self.config.max_retries {
                        std::thread::sleep(self.backoff(attempt, hint));
                    }
                }
            }
        }
        Err(self.unavailable(format!(
            "{} attempts failed, last: {last_reason}",
            self.config.max_retries + 1
        )))
    }

    fn id(&self) -> &str {
        "remote"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_url_tolerates_suffix_variants() {
        for base in [
            "http://h:8000",
            "http://h:8000/",
            "http://h:8000/v1",
            "http://h:8000/v1/",
        ] {
            assert_eq!(chat_url(base), "http://h:8000/v1/chat/completions");
        }
    }

    #[test]
    fn body_includes_system_message_only_when_present() {
        let mut request = PromptRequest {
            model_id: "m".into(),
            system_text: Some("be brief".into()),
            user_text: "hello".into(),
            temperature: 0.7,
            max_output_tokens: 32,
            run_index: 0,
        };
        let body = build_body(&request);
        let messages = body["messages"].as_array().unwrap();
        assert_eq!(messages.len(), 2);
        assert_eq!(messages[0]["role"], "system");
        assert_eq!(messages[1]["content"], "hello");
        assert_eq!(body["max_tokens"], 32);

        request.system_text = None;
        let body = build_body(&request);
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn context_overflow_detection_matches_common_phrasings() {
        assert!(looks_like_context_overflow(
            r#"{"error": {"message": "This model's maximum context length is 4096 tokens."}}"#
        ));
        assert!(looks_like_context_overflow("Requested tokens exceed context window"));
        assert!(!looks_like_context_overflow("invalid temperature"));
    }
}
