//! Context proposals from a chat-completions model, with a retry ladder and a
//! uniform fallback so a curriculum never stalls on a bad reply.

pub mod http;
pub mod mock;
pub mod parse;
pub mod prompt;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_space::{Context, ContextSpace};
use crate::curriculum::HistoryEntry;
use crate::rng::RunRng;

pub use http::HttpTransport;
pub use mock::{mock_propose, MockPolicy, MockTransport};
pub use parse::{parse_proposal, ParseError};
pub use prompt::{build_followup_prompt, build_initial_prompt, PromptBundle, SUGGESTION_MARKER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    /// Seconds.
    pub request_timeout: f64,
    /// Total attempts before falling back to a uniform sample.
    pub max_retries: u32,
    pub api_key_env_var: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1".into(),
            model_id: "Qwen/Qwen2.5-7B-Instruct-AWQ".into(),
            temperature: 0.7,
            top_p: 0.9,
            max_new_tokens: 400,
            request_timeout: 60.0,
            max_retries: 3,
            api_key_env_var: "OPENAI_API_KEY".into(),
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err("llm.temperature must be >= 0".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err("llm.top_p must be in (0, 1]".into());
        }
        if self.max_new_tokens < 1 {
            return Err("llm.max_new_tokens must be >= 1".into());
        }
        if self.max_retries < 1 {
            return Err("llm.max_retries must be >= 1".into());
        }
        if !(self.request_timeout > 0.0) {
            return Err("llm.request_timeout must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("transport error: {0}")]
pub struct TransportError(pub String);

/// Something that turns a prompt into assistant text.
pub trait Transport: Send {
    fn complete(
        &mut self,
        prompt: &PromptBundle,
        window: &[HistoryEntry],
        space: &ContextSpace,
        rng: &mut RunRng,
    ) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposerOutcome {
    pub context: Context,
    /// Assistant text of the final attempt, followed by a log of failures.
    pub raw_text: String,
    pub insights: String,
    pub attempts: u32,
    pub fallback_used: bool,
}

/// The curriculum-facing side of context generation.
pub trait Proposer {
    fn propose(
        &mut self,
        window: &[HistoryEntry],
        space: &ContextSpace,
        rng: &mut RunRng,
    ) -> ProposerOutcome;
}

pub struct LlmProposer<T> {
    transport: T,
    max_retries: u32,
}

impl<T: Transport> LlmProposer<T> {
    pub fn new(transport: T, max_retries: u32) -> Self {
        Self {
            transport,
            max_retries: max_retries.max(1),
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }
}

/// Queries the transport with the initial prompt (empty window) or follow-up
/// prompt, retrying on transport or parse failure. After `max_retries`
/// failed attempts a uniform sample is returned with `fallback_used` set.
pub fn propose<T: Transport + ?Sized>(
    transport: &mut T,
    max_retries: u32,
    window: &[HistoryEntry],
    space: &ContextSpace,
    rng: &mut RunRng,
) -> ProposerOutcome {
    let prompt = if window.is_empty() {
        build_initial_prompt(space)
    } else {
        build_followup_prompt(window, space)
    };
    let max_retries = max_retries.max(1);
    let mut log = String::new();
    for attempt in 1..=max_retries {
        match transport.complete(&prompt, window, space, rng) {
            Ok(text) => match parse_proposal(&text, space) {
                Ok(context) => {
                    let insights = parse::insights(&text);
                    let mut raw_text = text;
                    if !log.is_empty() {
                        raw_text.push_str("\n\n[earlier attempts]\n");
                        raw_text.push_str(&log);
                    }
                    return ProposerOutcome {
                        context,
                        raw_text,
                        insights,
                        attempts: attempt,
                        fallback_used: false,
                    };
                }
                Err(e) => {
                    let _ = writeln!(log, "attempt {attempt}: {e}; reply: {text}");
                }
            },
            Err(e) => {
                let _ = writeln!(log, "attempt {attempt}: {e}");
            }
        }
    }
    ProposerOutcome {
        context: space.sample_uniform(rng),
        raw_text: log,
        insights: String::new(),
        attempts: max_retries,
        fallback_used: true,
    }
}

impl<T: Transport> Proposer for LlmProposer<T> {
    fn propose(
        &mut self,
        window: &[HistoryEntry],
        space: &ContextSpace,
        rng: &mut RunRng,
    ) -> ProposerOutcome {
        propose(&mut self.transport, self.max_retries, window, space, rng)
    }
}
