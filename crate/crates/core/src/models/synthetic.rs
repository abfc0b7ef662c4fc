//! Planner-backed synthetic decision models.
//!
//! At every step the model scores the five commands with the planner's
//! progress values, adds a small preference for the planner's own first
//! action, perturbs each score with Gaussian noise of standard deviation
//! `noise_scale` and samples from the softmax at `temperature`. The emitted
//! token statistics are those of that softmax, so a model whose perturbed
//! scores are close together is both more likely to err and more uncertain.
//!
//! All draws come from a generator seeded by `(config.seed, state, step)`,
//! so a proposal is a pure function of its inputs.

use serde::{Deserialize, Serialize};

use super::prompts::{count_tokens, PromptTemplates};
use super::{ActionProposal, DecisionModel, ModelError, ModelId, Reasoning, StepContext, TokenCounts};
use crate::gridworld::{ActionName, GridState, Pos, Subgoal};
use crate::rng::{mix_seed, SplitMix64};
use crate::uq::{entropy_from_distribution, TokenScore};

/// Extra utility given to the planner's first action so that the
/// zero-temperature limit picks it even when several actions tie.
pub const PLANNER_PREFERENCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModelConfig {
    pub temperature: f64,
    pub noise_scale: f64,
    pub seed: u64,
    pub reasoning_noise: f64,
}

impl SyntheticModelConfig {
    /// Cheap, error-prone tier.
    pub fn small_tier() -> Self {
        Self {
            temperature: 0.55,
            noise_scale: 0.85,
            seed: 11,
            reasoning_noise: 0.5,
        }
    }

    /// Expensive, more reliable tier.
    pub fn large_tier() -> Self {
        Self {
            temperature: 0.55,
            noise_scale: 0.75,
            seed: 23,
            reasoning_noise: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(ModelError::Config("noise_scale must be nonnegative".into()));
        }
        if !(self.reasoning_noise >= 0.0 && self.reasoning_noise.is_finite()) {
            return Err(ModelError::Config("reasoning_noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Softmax of `utilities / temperature`.
pub fn softmax(utilities: &[f64], temperature: f64) -> Vec<f64> {
    let max = utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = utilities
        .iter()
        .map(|u| ((u - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Stable 64-bit fingerprint of a state.
pub fn state_fingerprint(state: &GridState) -> u64 {
    let pos = |p: Pos| ((p.x as u32 as u64) << 32) | p.y as u32 as u64;
    mix_seed(&[
        state.width as u64,
        state.height as u64,
        state.wall_column as u64,
        pos(state.door_position),
        state.key_position.map_or(u64::MAX, pos),
        pos(state.goal_position),
        pos(state.agent_position),
        state.agent_direction as u64,
        state.carrying_key as u64,
        state.door_open as u64,
        state.step_count as u64,
        state.max_steps as u64,
    ])
}

#[derive(Debug, Clone)]
struct Deliberation {
    commands: Vec<ActionName>,
    probs: Vec<f64>,
    entropy: f64,
    intended: usize,
    rng: SplitMix64,
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    id: ModelId,
    config: SyntheticModelConfig,
    templates: PromptTemplates,
}

impl SyntheticModel {
    pub fn new(id: ModelId, config: SyntheticModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            id,
            config,
            templates: PromptTemplates::default(),
        })
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn config(&self) -> &SyntheticModelConfig {
        &self.config
    }

    fn deliberate(&self, ctx: &StepContext<'_>) -> Result<Deliberation, ModelError> {
        if ctx.available_commands.is_empty() {
            return Err(ModelError::Config("no available commands".into()));
        }
        let state = ctx.state;
        let values = state
            .action_values()
            .map_err(|e| ModelError::State(e.to_string()))?;
        let planner = state
            .plan_route()
            .map_err(|e| ModelError::State(e.to_string()))?
            .first()
            .copied();

        let mut rng = SplitMix64::new(mix_seed(&[
            self.config.seed,
            state_fingerprint(state),
            ctx.step_index as u64,
        ]));
        // one draw per command in canonical order, whatever is available
        let noise: Vec<f64> = ActionName::ALL.iter().map(|_| rng.normal()).collect();

        let commands = ctx.available_commands.to_vec();
        let utilities: Vec<f64> = commands
            .iter()
            .map(|&a| {
                let bias = if Some(a) == planner { PLANNER_PREFERENCE } else { 0.0 };
                values.get(a) + bias + self.config.noise_scale * noise[a.index()]
            })
            .collect();
        let probs = softmax(&utilities, self.config.temperature);
        let entropy =
            entropy_from_distribution(&probs).map_err(|e| ModelError::State(e.to_string()))?;
        let intended = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, p)| if *p > probs[best] { i } else { best });
        Ok(Deliberation {
            commands,
            probs,
            entropy,
            intended,
            rng,
        })
    }
}

fn relative_location(agent: Pos, facing: crate::gridworld::Direction, target: Pos) -> String {
    if agent == target {
        return "same cell".into();
    }
    if agent.step(facing) == target {
        return "directly ahead".into();
    }
    let ns = match (target.y - agent.y).signum() {
        -1 => "north",
        1 => "south",
        _ => "",
    };
    let ew = match (target.x - agent.x).signum() {
        -1 => "west",
        1 => "east",
        _ => "",
    };
    let dir = match (ns.is_empty(), ew.is_empty()) {
        (false, false) => format!("{ns}-{ew}"),
        (false, true) => ns.to_string(),
        _ => ew.to_string(),
    };
    format!("to the {dir}")
}

fn reasoning_text(state: &GridState, intended: ActionName) -> String {
    let subgoal: Subgoal = state.subgoal();
    let target = state.subgoal_target();
    format!(
        "Subgoal: {}. Agent at {} facing {}. Target at {}, {}. Intended action: {}.",
        subgoal.phrase(),
        state.agent_position,
        state.agent_direction.name(),
        target,
        relative_location(state.agent_position, state.agent_direction, target),
        intended,
    )
}

impl DecisionModel for SyntheticModel {
    fn id(&self) -> &ModelId {
        &self.id
    }

    fn reason(&self, ctx: &StepContext<'_>) -> Result<Reasoning, ModelError> {
        let mut d = self.deliberate(ctx)?;
        // skip the draw reserved for action sampling
        d.rng.next_f64();

        let text = reasoning_text(ctx.state, d.commands[d.intended]);
        let base_entropy = d.entropy;
        let base_surprisal = -d.probs[d.intended].ln();
        let noise = self.config.reasoning_noise;
        let shared = noise * d.rng.normal();
        let scores = text
            .split_whitespace()
            .map(|_| {
                let entropy = (base_entropy + shared + 0.5 * noise * d.rng.normal()).max(0.0);
                let surprisal = (base_surprisal + shared + 0.5 * noise * d.rng.normal()).max(0.0);
                TokenScore {
                    chosen_logprob: -surprisal,
                    entropy,
                }
            })
            .collect();

        let prompt = self.templates.render_reasoning(
            ctx.task_description,
            &ctx.history_block(),
            ctx.available_commands,
        );
        Ok(Reasoning {
            tokens: TokenCounts {
                input: count_tokens(&prompt),
                output: count_tokens(&text),
            },
            text,
            scores,
        })
    }

    fn act(&self, ctx: &StepContext<'_>, reasoning: &Reasoning) -> Result<ActionProposal, ModelError> {
        let mut d = self.deliberate(ctx)?;
        let u = d.rng.next_f64();
        let mut acc = 0.0;
        let mut chosen = d.probs.len() - 1;
        for (i, p) in d.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let action = d.commands[chosen];
        let logprob = d.probs[chosen].ln().min(0.0);
        let action_scores: Vec<TokenScore> = action
            .as_str()
            .split_whitespace()
            .map(|_| TokenScore {
                chosen_logprob: logprob,
                entropy: d.entropy,
            })
            .collect();

        let prompt = self.templates.render_action(
            ctx.task_description,
            &ctx.history_block(),
            &reasoning.text,
            ctx.available_commands,
        );
        Ok(ActionProposal {
            action,
            raw_action: action.as_str().to_string(),
            reasoning_text: reasoning.text.clone(),
            reasoning_scores: reasoning.scores.clone(),
            action_tokens: TokenCounts {
                input: count_tokens(&prompt),
                output: action_scores.len() as u64,
            },
            action_scores,
            model: self.id.clone(),
            reasoning_tokens: reasoning.tokens,
            parse_fallback: false,
            top_k: None,
        })
    }
}
