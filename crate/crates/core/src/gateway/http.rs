//! OpenAI-compatible chat-completions backend over HTTP.

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendFailure, BackendReply, LlmRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Server base, e.g. `https://api.example.com/v1`. The backend appends
    /// `/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "http://localhost:8000/v1".to_string(),
            api_key: None,
            timeout_secs: 120,
        }
    }
}

pub struct HttpBackend {
    client: Client,
    endpoint: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        if config.base_url.trim().is_empty() {
            return Err(Error::Config("backend base_url is empty".into()));
        }
        let client = Client::builder()
            .timeout(std::time::Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(HttpBackend {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: config.api_key,
        })
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete_raw(&self, request: &LlmRequest) -> std::result::Result<BackendReply, BackendFailure> {
        let body = json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| BackendFailure::transport(format!("{e}")))?;
        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendFailure::rate_limit(format!("HTTP 429 from {}", self.endpoint)));
        }
        if status.is_server_error() {
            return Err(BackendFailure::transport(format!(
                "HTTP {} from {}",
                status.as_u16(),
                self.endpoint
            )));
        }
        if !status.is_success() {
            let excerpt: String = response
                .text()
                .unwrap_or_default()
                .chars()
                .take(300)
                .collect();
            return Err(BackendFailure::fatal(format!(
                "HTTP {} from {}: {excerpt}",
                status.as_u16(),
                self.endpoint
            )));
        }
        let completion: ChatCompletion = response
            .json()
            .map_err(|e| BackendFailure::fatal(format!("malformed completion body: {e}")))?;
        let text = completion
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .unwrap_or_default();
        let usage = completion.usage;
        Ok(BackendReply {
            text,
            prompt_tokens: usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}
