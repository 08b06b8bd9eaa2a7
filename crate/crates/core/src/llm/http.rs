//! Live HTTP backend: a single POST endpoint speaking a minimal
//! completion protocol. Endpoint and auth come from the environment so
//! credentials never land in session configs.

use super::{LlmBackend, LlmError, LlmRequest, LlmResponse};
use serde::Deserialize;
use serde_json::json;
use std::time::Duration;

pub const URL_ENV: &str = "AGENTTUNE_LLM_URL";
pub const KEY_ENV: &str = "AGENTTUNE_LLM_KEY";

pub struct HttpBackend {
    url: String,
    key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct WireUsage {
    tokens_in: u64,
    tokens_out: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    usage: WireUsage,
}

impl HttpBackend {
    /// Build from `AGENTTUNE_LLM_URL` (required) and `AGENTTUNE_LLM_KEY`
    /// (optional bearer token).
    pub fn from_env(model: impl Into<String>) -> Result<Self, LlmError> {
        let url = std::env::var(URL_ENV)
            .map_err(|_| LlmError::InvalidRequest(format!("{URL_ENV} is not set")))?;
        let key = std::env::var(KEY_ENV).ok();
        Ok(Self::new(url, key, model))
    }

    pub fn new(url: String, key: Option<String>, model: impl Into<String>) -> Self {
        HttpBackend {
            url,
            key,
            model: model.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("client construction cannot fail with static options"),
        }
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_output,
            "temperature": request.temperature,
        });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let response = req
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if status.is_server_error() {
            return Err(LlmError::Transport(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Err(LlmError::MalformedResponse(format!(
                "server returned {status}: {text}"
            )));
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| LlmError::MalformedResponse(format!("{e}; body: {text}")))?;
        Ok(LlmResponse {
            text: wire.text,
            tokens_in: wire.usage.tokens_in,
            tokens_out: wire.usage.tokens_out,
            backend_id: "http".into(),
        })
    }
}
