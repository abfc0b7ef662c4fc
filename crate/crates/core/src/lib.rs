//! Uncertainty-gated deferral from a small decision model to a large one,
//! evaluated on a DoorKey gridworld.

pub mod agent;
pub mod calibration;
pub mod float_repr;
pub mod gridworld;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod uq;

pub use agent::{
    run_batch, run_episode, AgentError, DeferralPolicy, EnvSpec, EpisodeRecord, StepRecord,
    SCHEMA_VERSION,
};
pub use gridworld::{ActionName, EpisodeOutcome, GridState};
pub use models::{ActionProposal, DecisionModel, ModelError, ModelId, Tier, TokenCounts};
pub use uq::{Measure, TokenScore, UncertaintyScore};
