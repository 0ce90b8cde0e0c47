//! Blocking client for OpenAI-compatible `/chat/completions` endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LlmConfig, PromptBundle, Transport, TransportError};
use crate::context_space::ContextSpace;
use crate::curriculum::HistoryEntry;
use crate::rng::RunRng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
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
    content: Option<String>,
}

impl ChatRequest {
    /// Empty message texts are left out; the initial prompt is system-only.
    pub fn new(cfg: &LlmConfig, prompt: &PromptBundle) -> Self {
        let mut messages = Vec::with_capacity(2);
        for (role, text) in [("system", &prompt.system_text), ("user", &prompt.user_text)] {
            if !text.is_empty() {
                messages.push(ChatMessage {
                    role: role.into(),
                    content: text.clone(),
                });
            }
        }
        Self {
            model: cfg.model_id.clone(),
            messages,
            temperature: cfg.temperature,
            top_p: cfg.top_p,
            max_tokens: cfg.max_new_tokens,
        }
    }
}

pub fn completions_url(endpoint: &str) -> String {
    format!("{}/chat/completions", endpoint.trim_end_matches('/'))
}

pub struct HttpTransport {
    cfg: LlmConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpTransport {
    /// Reads the API key from the configured environment variable, if set.
    pub fn new(cfg: LlmConfig) -> Self {
        let api_key = std::env::var(&cfg.api_key_env_var)
            .ok()
            .filter(|k| !k.is_empty());
        Self::with_api_key(cfg, api_key)
    }

    pub fn with_api_key(cfg: LlmConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.request_timeout)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            cfg,
            agent,
            api_key,
        }
    }

    pub fn send(&self, prompt: &PromptBundle) -> Result<String, TransportError> {
        let url = completions_url(&self.cfg.endpoint_url);
        let mut req = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(ChatRequest::new(&self.cfg, prompt))
            .map_err(|e| TransportError(format!("POST {url}: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(TransportError(format!("POST {url}: HTTP {status}: {body}")));
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError(format!("malformed completion body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError("completion has no choices[0].message.content".into()))
    }
}

impl Transport for HttpTransport {
    fn complete(
        &mut self,
        prompt: &PromptBundle,
        _window: &[HistoryEntry],
        _space: &ContextSpace,
        _rng: &mut RunRng,
    ) -> Result<String, TransportError> {
        self.send(prompt)
    }
}
