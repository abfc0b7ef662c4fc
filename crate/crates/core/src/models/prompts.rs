//! Prompt templates for the two-call reason/act loop.
//!
//! Placeholders: `{DESCRIPTION}`, `{HISTORY}`, `{AVAILABLE_COMMANDS}` and,
//! in the action template only, `{THOUGHTS}`.

use serde::{Deserialize, Serialize};

use crate::gridworld::ActionName;

pub const DEFAULT_REASONING_TEMPLATE: &str = "\
You are an AI agent solving a task in an interactive environment.

TASK DESCRIPTION:
{DESCRIPTION}

ENVIRONMENT HISTORY:
{HISTORY}

AVAILABLE COMMANDS:
{AVAILABLE_COMMANDS}

Think step by step, but keep your reasoning short, precise, and grounded only in the current observation and history.

Follow this reasoning procedure strictly:
1. Summarize only the important facts from the current observation and history.
2. Identify the current subgoal:
   - If the key has not been picked up, the subgoal is to get key.
   - If the key has been picked up but the door is not open, the subgoal is to open door.
   - If the door is open, the subgoal is to go to goal.
3. Identify the exact position of the agent and the current target using the provided grid.
   - State the agent position and facing direction.
   - State the target position.
   - Compute the target's relative location from the agent: same cell, directly ahead, behind, left, right, or requiring movement.
   - Determine whether the target is immediately interactable:
     - pickup is valid only if the key is in the cell directly in front.
     - toggle is valid only if the door is in the cell directly in front.
4. Check whether the last few actions show useless repetition or left-right oscillation.
5. Choose the one action that makes the most direct progress toward the current subgoal.
6. Do not change subgoal unless the current one is completed or impossible.

Reasoning rules:
- Turning changes orientation only; it does not move the agent.
- pickup and toggle work only when the target object is directly in front of the agent.
- Do not alternate left and right repeatedly unless there is a clear new reason.
- If you already know the door exists but do not have the key, prioritize getting the key instead of returning attention to the door.

After forming your initial reasoning, perform a brief self-critique:

Critique checklist:
- Did I use correct coordinates from the grid?
- If I chose pickup or toggle, is the target actually in the front cell?
- Does this action make progress toward the current subgoal?
- Am I repeating recent actions (e.g., left-right oscillation)?
- Am I mistakenly focusing on the door before getting the key?

If any issue is found, correct your reasoning and update the action choice.

Keep the critique short and focused. Do not repeat the full reasoning.

Keep the reasoning compact and action-oriented.
Your thought process:";

pub const DEFAULT_ACTION_TEMPLATE: &str = "\
You are an AI agent solving a task in an interactive environment.

TASK DESCRIPTION:
{DESCRIPTION}

ENVIRONMENT HISTORY:
{HISTORY}

YOUR CURRENT REASONING:
{THOUGHTS}

AVAILABLE COMMANDS:
{AVAILABLE_COMMANDS}

OUTPUT RULES:
- Output exactly ONE line.
- That line must be EXACTLY one of the AVAILABLE COMMANDS.
- Do NOT output reasoning, explanation, punctuation, or extra words.

Now output your chosen action (one line only):";

pub const CORRECTIVE_SUFFIX: &str = "\n\nYour previous reply was not one of the AVAILABLE COMMANDS. \
Reply with exactly one of them and nothing else.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    #[serde(default = "default_reasoning")]
    pub reasoning: String,
    #[serde(default = "default_action")]
    pub action: String,
}

fn default_reasoning() -> String {
    DEFAULT_REASONING_TEMPLATE.to_string()
}

fn default_action() -> String {
    DEFAULT_ACTION_TEMPLATE.to_string()
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            reasoning: default_reasoning(),
            action: default_action(),
        }
    }
}

pub fn format_commands(commands: &[ActionName]) -> String {
    commands
        .iter()
        .map(|c| c.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

impl PromptTemplates {
    pub fn render_reasoning(&self, description: &str, history: &str, commands: &[ActionName]) -> String {
        self.reasoning
            .replace("{DESCRIPTION}", description)
            .replace("{HISTORY}", history)
            .replace("{AVAILABLE_COMMANDS}", &format_commands(commands))
    }

    pub fn render_action(
        &self,
        description: &str,
        history: &str,
        thoughts: &str,
        commands: &[ActionName],
    ) -> String {
        self.action
            .replace("{DESCRIPTION}", description)
            .replace("{HISTORY}", history)
            .replace("{THOUGHTS}", thoughts)
            .replace("{AVAILABLE_COMMANDS}", &format_commands(commands))
    }
}

/// Whitespace token count, used as the token estimate for synthetic models.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
