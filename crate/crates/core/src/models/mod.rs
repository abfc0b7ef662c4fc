//! Decision models: a reasoning call followed by an action call that
//! reports per-token statistics.
//!
//! [`SyntheticModel`] is an offline stand-in driven by the planner;
//! [`RemoteModel`] talks to an OpenAI-compatible chat-completions backend.

pub mod prompts;
pub mod remote;
pub mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{ActionName, GridState};
use crate::uq::TokenScore;

pub use prompts::PromptTemplates;
pub use remote::{ChatTransport, HttpReply, RemoteEndpoint, RemoteModel, UreqTransport};
pub use synthetic::{SyntheticModel, SyntheticModelConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response after {attempts} attempt(s): {message}")]
    MalformedResponse { attempts: u32, message: String },
    #[error("backend lacks logprobs")]
    MissingLogprobs,
    #[error("unparseable action {0:?}")]
    UnparseableAction(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("model cannot score this state: {0}")]
    State(String),
}

impl ModelError {
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            ModelError::Transport { .. } | ModelError::MalformedResponse { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Small,
    Large,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelId {
    pub name: String,
    pub tier: Tier,
}

impl ModelId {
    pub fn new(name: impl Into<String>, tier: Tier) -> Self {
        Self {
            name: name.into(),
            tier,
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub input: u64,
    pub output: u64,
}

impl std::ops::AddAssign for TokenCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.input += rhs.input;
        self.output += rhs.output;
    }
}

/// Everything a model sees at one step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub task_description: &'a str,
    /// Prior steps only; the current observation is passed separately.
    pub history: &'a str,
    pub observation: &'a str,
    pub available_commands: &'a [ActionName],
    /// Ground-truth state. Only the synthetic models look at it.
    pub state: &'a GridState,
    pub step_index: u32,
}

impl StepContext<'_> {
    /// History block embedded in prompts: prior steps then the current view.
    pub fn history_block(&self) -> String {
        if self.history.is_empty() {
            format!("Current observation:\n{}", self.observation)
        } else {
            format!("{}\n\nCurrent observation:\n{}", self.history, self.observation)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reasoning {
    pub text: String,
    pub scores: Vec<TokenScore>,
    pub tokens: TokenCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionProposal {
    pub action: ActionName,
    /// Reply text before parsing.
    pub raw_action: String,
    pub reasoning_text: String,
    pub reasoning_scores: Vec<TokenScore>,
    pub action_scores: Vec<TokenScore>,
    pub model: ModelId,
    pub reasoning_tokens: TokenCounts,
    pub action_tokens: TokenCounts,
    /// Set when the reply never matched a command and `left` was substituted.
    #[serde(default)]
    pub parse_fallback: bool,
    /// Width of the returned top-k alternatives, when truncated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
}

impl ActionProposal {
    pub fn total_tokens(&self) -> TokenCounts {
        let mut t = self.reasoning_tokens;
        t += self.action_tokens;
        t
    }
}

pub trait DecisionModel: Send + Sync {
    fn id(&self) -> &ModelId;

    fn reason(&self, ctx: &StepContext<'_>) -> Result<Reasoning, ModelError>;

    fn act(&self, ctx: &StepContext<'_>, reasoning: &Reasoning) -> Result<ActionProposal, ModelError>;
}

/// Matches the first line of a reply against the available commands after
/// trimming and case-folding.
pub fn parse_action(raw: &str, available: &[ActionName]) -> Result<ActionName, ModelError> {
    let first = raw.trim_start().lines().next().unwrap_or("").trim().to_lowercase();
    available
        .iter()
        .copied()
        .find(|a| a.as_str() == first)
        .ok_or_else(|| ModelError::UnparseableAction(raw.to_string()))
}
