//! OpenAI-compatible chat-completions adapter.
//!
//! Requests ask for per-token logprobs with `top_logprobs` alternatives.
//! Each generated token becomes a [`TokenScore`]: its own logprob, and the
//! entropy of its renormalized top-k alternatives. Token usage is taken from
//! the reply's `usage` block.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::prompts::{PromptTemplates, CORRECTIVE_SUFFIX};
use super::{
    parse_action, ActionProposal, DecisionModel, ModelError, ModelId, Reasoning, StepContext,
    TokenCounts,
};
use crate::gridworld::ActionName;
use crate::uq::{entropy_from_logprobs, TokenScore};

fn default_top_logprobs() -> u32 {
    20
}
fn default_max_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_api_key_env() -> String {
    "DEFERRAL_API_KEY".to_string()
}
fn default_sentinels() -> Vec<String> {
    ["<|eot_id|>", "<|im_end|>", "<|endoftext|>", "</s>", "<|end|>"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteEndpoint {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u32,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    /// First backoff delay; doubles on each retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// End-of-sequence tokens excluded from the scored generation.
    #[serde(default = "default_sentinels")]
    pub eos_sentinels: Vec<String>,
}

impl RemoteEndpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: default_api_key_env(),
            temperature: 0.0,
            top_logprobs: default_top_logprobs(),
            max_attempts: default_max_attempts(),
            backoff_ms: default_backoff_ms(),
            eos_sentinels: default_sentinels(),
        }
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Blocking JSON POST. Implementations must not treat non-2xx statuses as
/// errors; those come back as an [`HttpReply`].
pub trait ChatTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl ChatTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Debug, Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireAlternative>,
}

#[derive(Debug, Deserialize)]
struct WireAlternative {
    logprob: f64,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// One scored completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub scores: Vec<TokenScore>,
    pub tokens: TokenCounts,
    pub attempts: u32,
    pub top_k: u32,
}

pub fn build_request(endpoint: &RemoteEndpoint, prompt: &str) -> serde_json::Value {
    json!({
        "model": endpoint.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": endpoint.temperature,
        "logprobs": true,
        "top_logprobs": endpoint.top_logprobs,
    })
}

/// Maps a response body into a scored completion.
fn decode_reply(endpoint: &RemoteEndpoint, body: &str, attempts: u32) -> Result<Completion, ModelError> {
    let reply: WireReply = serde_json::from_str(body).map_err(|e| ModelError::MalformedResponse {
        attempts,
        message: e.to_string(),
    })?;
    let choice = reply
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| ModelError::MalformedResponse {
            attempts,
            message: "no choices".into(),
        })?;
    let tokens = choice
        .logprobs
        .and_then(|l| l.content)
        .ok_or(ModelError::MissingLogprobs)?;

    let mut scores = Vec::with_capacity(tokens.len());
    let mut top_k = 0;
    for t in tokens {
        if endpoint.eos_sentinels.iter().any(|s| s == &t.token) {
            continue;
        }
        if t.top_logprobs.is_empty() || !t.logprob.is_finite() {
            return Err(ModelError::MissingLogprobs);
        }
        top_k = top_k.max(t.top_logprobs.len() as u32);
        let alternatives: Vec<f64> = t.top_logprobs.iter().map(|a| a.logprob).collect();
        let entropy = entropy_from_logprobs(&alternatives).map_err(|e| ModelError::MalformedResponse {
            attempts,
            message: e.to_string(),
        })?;
        scores.push(TokenScore {
            chosen_logprob: t.logprob.min(0.0),
            entropy,
        });
    }
    if scores.is_empty() {
        return Err(ModelError::MissingLogprobs);
    }
    let usage = reply.usage.ok_or_else(|| ModelError::MalformedResponse {
        attempts,
        message: "missing usage block".into(),
    })?;
    Ok(Completion {
        text: choice.message.content.unwrap_or_default(),
        scores,
        tokens: TokenCounts {
            input: usage.prompt_tokens,
            output: usage.completion_tokens,
        },
        attempts,
        top_k,
    })
}

/// Sends one prompt, retrying transport failures, non-2xx replies and
/// malformed bodies with exponential backoff.
pub fn remote_complete(
    transport: &dyn ChatTransport,
    endpoint: &RemoteEndpoint,
    bearer: Option<&str>,
    prompt: &str,
) -> Result<Completion, ModelError> {
    let body = build_request(endpoint, prompt).to_string();
    let url = endpoint.completions_url();
    let max_attempts = endpoint.max_attempts.max(1);
    let mut last_error = None;
    for attempt in 1..=max_attempts {
        if attempt > 1 {
            let delay = endpoint.backoff_ms.saturating_mul(1 << (attempt - 2));
            std::thread::sleep(Duration::from_millis(delay));
        }
        match transport.post_json(&url, bearer, &body) {
            Ok(reply) if (200..300).contains(&reply.status) => {
                match decode_reply(endpoint, &reply.body, attempt) {
                    Ok(c) => return Ok(c),
                    Err(e) if e.is_retriable() => last_error = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Ok(reply) => {
                last_error = Some(ModelError::Transport {
                    attempts: attempt,
                    message: format!("HTTP {}: {}", reply.status, reply.body),
                })
            }
            Err(message) => {
                last_error = Some(ModelError::Transport {
                    attempts: attempt,
                    message,
                })
            }
        }
    }
    Err(last_error.expect("at least one attempt"))
}

pub struct RemoteModel {
    id: ModelId,
    endpoint: RemoteEndpoint,
    templates: PromptTemplates,
    transport: Arc<dyn ChatTransport>,
    bearer: Option<String>,
}

impl RemoteModel {
    /// Reads the bearer token from the endpoint's environment variable.
    pub fn from_env(id: ModelId, endpoint: RemoteEndpoint, transport: Arc<dyn ChatTransport>) -> Self {
        let bearer = std::env::var(&endpoint.api_key_env).ok();
        Self::with_bearer(id, endpoint, transport, bearer)
    }

    pub fn with_bearer(
        id: ModelId,
        endpoint: RemoteEndpoint,
        transport: Arc<dyn ChatTransport>,
        bearer: Option<String>,
    ) -> Self {
        Self {
            id,
            endpoint,
            templates: PromptTemplates::default(),
            transport,
            bearer,
        }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    fn complete(&self, prompt: &str) -> Result<Completion, ModelError> {
        remote_complete(
            self.transport.as_ref(),
            &self.endpoint,
            self.bearer.as_deref(),
            prompt,
        )
    }
}

impl DecisionModel for RemoteModel {
    fn id(&self) -> &ModelId {
        &self.id
    }

    fn reason(&self, ctx: &StepContext<'_>) -> Result<Reasoning, ModelError> {
        let prompt = self.templates.render_reasoning(
            ctx.task_description,
            &ctx.history_block(),
            ctx.available_commands,
        );
        let c = self.complete(&prompt)?;
        Ok(Reasoning {
            text: c.text,
            scores: c.scores,
            tokens: c.tokens,
        })
    }

    fn act(&self, ctx: &StepContext<'_>, reasoning: &Reasoning) -> Result<ActionProposal, ModelError> {
        let prompt = self.templates.render_action(
            ctx.task_description,
            &ctx.history_block(),
            &reasoning.text,
            ctx.available_commands,
        );
        let first = self.complete(&prompt)?;
        let mut tokens = first.tokens;
        let (action, completion, fallback) = match parse_action(&first.text, ctx.available_commands) {
            Ok(a) => (a, first, false),
            Err(_) => {
                let retry = self.complete(&format!("{prompt}{CORRECTIVE_SUFFIX}"))?;
                tokens += retry.tokens;
                match parse_action(&retry.text, ctx.available_commands) {
                    Ok(a) => (a, retry, false),
                    Err(_) => (ActionName::Left, retry, true),
                }
            }
        };
        Ok(ActionProposal {
            action,
            raw_action: completion.text,
            reasoning_text: reasoning.text.clone(),
            reasoning_scores: reasoning.scores.clone(),
            action_scores: completion.scores,
            model: self.id.clone(),
            reasoning_tokens: reasoning.tokens,
            action_tokens: tokens,
            parse_fallback: fallback,
            top_k: Some(completion.top_k),
        })
    }
}
