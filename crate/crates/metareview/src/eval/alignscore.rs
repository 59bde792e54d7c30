//! Client for an AlignScore scoring service.
//!
//! The scorer is a separate model server (it runs a fine-tuned alignment
//! model); this module only speaks its HTTP protocol: POST `{base}/score`
//! with `{"context", "claim", "mode": "nli_sp"}`, answered by `{"score"}`.

use std::time::Duration;

use serde::Deserialize;

use super::EvalError;

pub struct AlignScoreClient {
    url: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl AlignScoreClient {
    pub fn new(base_url: &str) -> Result<Self, EvalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .connect_timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| EvalError::ScorerUnavailable {
                url: base_url.to_string(),
                reason: e.to_string(),
            })?;
        Ok(AlignScoreClient {
            url: format!("{}/score", base_url.trim_end_matches('/')),
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// How well `claim` is supported by `context`, in [0, 1].
    pub fn score(&self, context: &str, claim: &str) -> Result<f64, EvalError> {
        let body = serde_json::json!({
            "context": context,
            "claim": claim,
            "mode": "nli_sp",
        });
        let response = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| EvalError::ScorerUnavailable {
                url: self.url.clone(),
                reason: e.to_string(),
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| EvalError::ScorerProtocol {
            reason: format!("reading scorer response: {e}"),
        })?;
        if !status.is_success() {
            return Err(EvalError::ScorerUnavailable {
                url: self.url.clone(),
                reason: format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
            });
        }
        let parsed: ScoreResponse =
            serde_json::from_str(&text).map_err(|e| EvalError::ScorerProtocol {
                reason: format!("malformed scorer response: {e}"),
            })?;
        Ok(parsed.score)
    }
}
