//! The reason → score → accept-or-defer → act episode loop.
//!
//! Each step the small model reasons and proposes an action. The proposal's
//! action-stage uncertainty is compared with the policy; on deferral the
//! large model reasons from scratch and its action is taken as is. The
//! small proposal is always logged, deferred or not.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::float_repr;
use crate::gridworld::{self, ActionName, EpisodeOutcome, GridState, TASK_DESCRIPTION};
use crate::models::{ActionProposal, DecisionModel, StepContext, TokenCounts};
use crate::rng::{mix_seed, SplitMix64};
use crate::uq::{Measure, UncertaintyScore};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid environment: {0}")]
    Environment(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DeferralPolicy {
    Never,
    Always,
    Random {
        p_defer: f64,
        seed: u64,
    },
    Threshold {
        measure: Measure,
        #[serde(with = "float_repr")]
        tau: f64,
    },
}

impl DeferralPolicy {
    pub fn validate(&self) -> Result<(), AgentError> {
        match *self {
            DeferralPolicy::Random { p_defer, .. } if !(0.0..=1.0).contains(&p_defer) => Err(
                AgentError::InvalidPolicy(format!("p_defer {p_defer} outside [0, 1]")),
            ),
            DeferralPolicy::Threshold { tau, .. } if tau.is_nan() => {
                Err(AgentError::InvalidPolicy("tau is NaN".into()))
            }
            _ => Ok(()),
        }
    }

    /// Measure used to score steps. Non-threshold policies log perplexity.
    pub fn measure(&self) -> Measure {
        match self {
            DeferralPolicy::Threshold { measure, .. } => *measure,
            _ => Measure::Perplexity,
        }
    }

    pub fn label(&self) -> String {
        match self {
            DeferralPolicy::Never => "never".into(),
            DeferralPolicy::Always => "always".into(),
            DeferralPolicy::Random { .. } => "random".into(),
            DeferralPolicy::Threshold { measure, .. } => {
                format!("threshold-{}", measure.short_name().to_lowercase())
            }
        }
    }
}

/// Environment parameters for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub size: u32,
    pub max_steps: u32,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            size: gridworld::DEFAULT_SIZE,
            max_steps: gridworld::DEFAULT_MAX_STEPS,
        }
    }
}

/// All three measures of one score list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureValues {
    pub sp: f64,
    pub ppl: f64,
    pub mte: f64,
}

impl MeasureValues {
    pub fn of(scores: &[crate::uq::TokenScore]) -> Option<Self> {
        Some(Self {
            sp: crate::uq::sequence_probability(scores).ok()?.value,
            ppl: crate::uq::perplexity(scores).ok()?.value,
            mte: crate::uq::mean_token_entropy(scores).ok()?.value,
        })
    }

    pub fn get(&self, measure: Measure) -> f64 {
        match measure {
            Measure::SequenceProbability => self.sp,
            Measure::Perplexity => self.ppl,
            Measure::MeanTokenEntropy => self.mte,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: u32,
    pub observation_text: String,
    /// Absent for environments that cannot be replayed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_before: Option<GridState>,
    pub small_proposal: ActionProposal,
    pub uncertainty: UncertaintyScore,
    pub deferred: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub large_proposal: Option<ActionProposal>,
    pub accepted_action: ActionName,
    pub correct_label: u8,
    pub parse_fallback: bool,
}

impl StepRecord {
    pub fn accepted_proposal(&self) -> &ActionProposal {
        self.large_proposal.as_ref().unwrap_or(&self.small_proposal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema_version: u32,
    #[serde(default)]
    pub config_hash: String,
    pub episode_id: u64,
    pub seed: u64,
    pub policy: DeferralPolicy,
    pub small_model: String,
    pub large_model: String,
    pub steps: Vec<StepRecord>,
    /// Absent when the episode was aborted by an infrastructure failure.
    pub outcome: Option<EpisodeOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Token usage per model name.
    pub totals: BTreeMap<String, TokenCounts>,
    pub large_calls: u32,
}

impl EpisodeRecord {
    pub fn is_diagnosed_failure(&self) -> bool {
        self.failure.is_some()
    }

    pub fn success(&self) -> bool {
        self.outcome.is_some_and(|o| o.success)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Correctness of an accepted action: 1 unless it moves away from the goal
/// or changes nothing.
pub fn label_step(state_before: &GridState, action: ActionName) -> u8 {
    match state_before.action_values() {
        Ok(values) => u8::from(values.get(action) >= 0.5),
        Err(_) => 0,
    }
}

struct HistoryEntry {
    observation: String,
    reasoning: String,
    action: ActionName,
}

fn render_history(entries: &[HistoryEntry]) -> String {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            format!(
                "Step {}:\nObservation:\n{}\nReasoning: {}\nAction: {}",
                i + 1,
                e.observation,
                e.reasoning,
                e.action
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Runs one episode on the layout generated from `env_seed`.
pub fn run_episode(
    env_seed: u64,
    env: EnvSpec,
    small: &dyn DecisionModel,
    large: &dyn DecisionModel,
    policy: &DeferralPolicy,
    episode_id: u64,
) -> Result<EpisodeRecord, AgentError> {
    policy.validate()?;
    let mut state = gridworld::generate_with_cap(env_seed, env.size, env.max_steps)
        .map_err(|e| AgentError::Environment(e.to_string()))?;
    let measure = policy.measure();
    let mut coin = match policy {
        DeferralPolicy::Random { seed, .. } => Some(SplitMix64::new(mix_seed(&[*seed, env_seed]))),
        _ => None,
    };

    let mut record = EpisodeRecord {
        schema_version: SCHEMA_VERSION,
        config_hash: String::new(),
        episode_id,
        seed: env_seed,
        policy: *policy,
        small_model: small.id().name.clone(),
        large_model: large.id().name.clone(),
        steps: Vec::new(),
        outcome: None,
        failure: None,
        totals: BTreeMap::from([
            (small.id().name.clone(), TokenCounts::default()),
            (large.id().name.clone(), TokenCounts::default()),
        ]),
        large_calls: 0,
    };
    let mut history: Vec<HistoryEntry> = Vec::new();
    let commands = ActionName::ALL;

    while record.outcome.is_none() {
        let step_index = state.step_count + 1;
        let observation = state.render_full_view();
        let history_text = render_history(&history);
        let ctx = StepContext {
            task_description: TASK_DESCRIPTION,
            history: &history_text,
            observation: &observation,
            available_commands: &commands,
            state: &state,
            step_index,
        };

        let small_proposal = match small.reason(&ctx).and_then(|r| small.act(&ctx, &r)) {
            Ok(p) => p,
            Err(e) => {
                record.failure = Some(format!("small model at step {step_index}: {e}"));
                break;
            }
        };
        *record.totals.entry(small.id().name.clone()).or_default() += small_proposal.total_tokens();

        let uncertainty = match measure.score(&small_proposal.action_scores) {
            Ok(u) => u,
            Err(e) => {
                record.failure = Some(format!("scoring at step {step_index}: {e}"));
                break;
            }
        };
        let draw = coin.as_mut().map(|c| c.next_f64());
        let deferred = match *policy {
            DeferralPolicy::Never => false,
            DeferralPolicy::Always => true,
            DeferralPolicy::Random { p_defer, .. } => draw.is_some_and(|u| u < p_defer),
            DeferralPolicy::Threshold { tau, .. } => uncertainty.value > tau,
        };

        let large_proposal = if deferred {
            match large.reason(&ctx).and_then(|r| large.act(&ctx, &r)) {
                Ok(p) => {
                    *record.totals.entry(large.id().name.clone()).or_default() += p.total_tokens();
                    record.large_calls += 1;
                    Some(p)
                }
                Err(e) => {
                    record.failure = Some(format!("large model at step {step_index}: {e}"));
                    break;
                }
            }
        } else {
            None
        };

        let accepted = large_proposal.as_ref().unwrap_or(&small_proposal);
        let accepted_action = accepted.action;
        let parse_fallback = accepted.parse_fallback;
        let reasoning = accepted.reasoning_text.clone();
        let correct_label = label_step(&state, accepted_action);

        let (next, outcome) = state
            .step(accepted_action)
            .map_err(|e| AgentError::Environment(e.to_string()))?;
        history.push(HistoryEntry {
            observation: observation.clone(),
            reasoning,
            action: accepted_action,
        });
        record.steps.push(StepRecord {
            step_index,
            observation_text: observation,
            state_before: Some(state),
            small_proposal,
            uncertainty,
            deferred,
            large_proposal,
            accepted_action,
            correct_label,
            parse_fallback,
        });
        state = next;
        record.outcome = outcome;
    }
    Ok(record)
}

/// Runs one episode per seed on a pool of `parallelism` workers. Output
/// order follows `seeds`, whatever the scheduling.
pub fn run_batch(
    seeds: &[u64],
    env: EnvSpec,
    small: &dyn DecisionModel,
    large: &dyn DecisionModel,
    policy: &DeferralPolicy,
    parallelism: usize,
) -> Result<Vec<EpisodeRecord>, AgentError> {
    if seeds.is_empty() {
        return Err(AgentError::InvalidBatch("no episodes requested".into()));
    }
    policy.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| AgentError::InvalidBatch(e.to_string()))?;
    pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| run_episode(seed, env, small, large, policy, i as u64))
            .collect()
    })
}
