//! Chat-completions client and the model-backed agent.

use std::sync::Arc;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::grammar::parse_action;
use super::prompt::{build_user_prompt, AgentTurnInput, SYSTEM_PREAMBLE};
use super::{Agent, AgentError};
use crate::env::Action;

pub const API_KEY_ENV: &str = "KGCE_MODEL_API_KEY";
pub const BASE_URL_ENV: &str = "KGCE_MODEL_BASE_URL";

fn default_api_key_env() -> String {
    API_KEY_ENV.to_string()
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpointConfig {
    /// `http(s)://...` for a live endpoint, `mock:<path>` for a mock plan file.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Initial backoff; doubled after every failed attempt.
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default)]
    pub temperature: f64,
}

impl ModelEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_api_key_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            retry_backoff_ms: default_backoff(),
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.timeout_secs == 0 {
            return Err("timeout_secs must be positive".into());
        }
        if self.base_url.is_empty() {
            return Err("base_url is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transport error: {message}")]
pub struct TransportError {
    pub message: String,
    pub retryable: bool,
}

impl TransportError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }
}

/// Sends one chat request and returns the assistant text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

/// Chat-completions over HTTP. Safe to share between episodes.
pub struct HttpTransport {
    client: Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &ModelEndpointConfig) -> Result<Self, TransportError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| TransportError::fatal(format!("failed to build HTTP client: {e}")))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut builder = self
            .client
            .post(&self.url)
            .header(CONTENT_TYPE, "application/json")
            .body(serde_json::to_vec(request).map_err(|e| TransportError::fatal(e.to_string()))?);
        if let Some(key) = &self.api_key {
            builder = builder.header(AUTHORIZATION, format!("Bearer {key}"));
        }
        let response = builder
            .send()
            .map_err(|e| TransportError::retryable(format!("request failed: {e}")))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| TransportError::retryable(format!("failed to read body: {e}")))?;
        if !status.is_success() {
            let message = format!("HTTP {status}: {body}");
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                TransportError::retryable(message)
            } else {
                TransportError::fatal(message)
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&body)
            .map_err(|e| TransportError::fatal(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::fatal("response has no message content"))
    }
}

pub fn chat_request(config: &ModelEndpointConfig, input: &AgentTurnInput) -> ChatRequest {
    ChatRequest {
        model: config.model.clone(),
        messages: vec![
            ChatMessage {
                role: "system".into(),
                content: SYSTEM_PREAMBLE.into(),
            },
            ChatMessage {
                role: "user".into(),
                content: build_user_prompt(input),
            },
        ],
        temperature: config.temperature,
    }
}

/// Builds the prompt, calls the endpoint with retries and parses the reply.
pub fn model_next(
    config: &ModelEndpointConfig,
    transport: &dyn ChatTransport,
    input: &AgentTurnInput,
) -> Result<Action, AgentError> {
    let request = chat_request(config, input);
    let mut attempt = 0;
    let reply = loop {
        match transport.complete(&request) {
            Ok(text) => break text,
            Err(e) if e.retryable && attempt < config.max_retries => {
                let delay = config.retry_backoff_ms.saturating_mul(1u64 << attempt.min(16));
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
            Err(e) => return Err(e.into()),
        }
    };
    parse_action(&reply)
        .map(|p| p.action)
        .map_err(|failure| AgentError::Parse { raw: reply, failure })
}

pub struct ModelAgent {
    config: ModelEndpointConfig,
    transport: Arc<dyn ChatTransport>,
}

impl ModelAgent {
    pub fn new(config: ModelEndpointConfig, transport: Arc<dyn ChatTransport>) -> Self {
        Self { config, transport }
    }
}

impl Agent for ModelAgent {
    fn next_action(&mut self, input: &AgentTurnInput) -> Result<Action, AgentError> {
        model_next(&self.config, self.transport.as_ref(), input)
    }

    fn kind(&self) -> &'static str {
        "model"
    }
}
