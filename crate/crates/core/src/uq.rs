//! Token-level uncertainty measures.
//!
//! All three measures aggregate the per-token statistics of one generated
//! action into a scalar, using natural logarithms throughout:
//!
//! - sequence probability: `-Σ log p(y_i)`
//! - perplexity: `-(1/L) Σ log p(y_i)`
//! - mean token entropy: `(1/L) Σ H(y_i)`
//!
//! Higher is more uncertain.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UqError {
    #[error("empty generation")]
    EmptyGeneration,
    #[error("degenerate distribution")]
    DegenerateDistribution,
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("invalid token score (logprob {chosen_logprob}, entropy {entropy})")]
    InvalidTokenScore { chosen_logprob: f64, entropy: f64 },
    #[error("unknown measure {0:?}")]
    UnknownMeasure(String),
}

/// Statistics of one generated token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    /// Natural-log probability of the emitted token, `<= 0`.
    pub chosen_logprob: f64,
    /// Entropy in nats of the next-token distribution at this position.
    pub entropy: f64,
}

impl TokenScore {
    pub fn new(chosen_logprob: f64, entropy: f64) -> Result<Self, UqError> {
        let score = Self {
            chosen_logprob,
            entropy,
        };
        if score.is_valid() {
            Ok(score)
        } else {
            Err(UqError::InvalidTokenScore {
                chosen_logprob,
                entropy,
            })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.chosen_logprob.is_finite()
            && self.entropy.is_finite()
            && self.chosen_logprob <= 0.0
            && self.entropy >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "SP")]
    SequenceProbability,
    #[serde(rename = "PPL")]
    Perplexity,
    #[serde(rename = "MTE")]
    MeanTokenEntropy,
}

impl Measure {
    pub const ALL: [Measure; 3] = [
        Measure::SequenceProbability,
        Measure::Perplexity,
        Measure::MeanTokenEntropy,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Measure::SequenceProbability => "SP",
            Measure::Perplexity => "PPL",
            Measure::MeanTokenEntropy => "MTE",
        }
    }

    pub fn score(self, scores: &[TokenScore]) -> Result<UncertaintyScore, UqError> {
        match self {
            Measure::SequenceProbability => sequence_probability(scores),
            Measure::Perplexity => perplexity(scores),
            Measure::MeanTokenEntropy => mean_token_entropy(scores),
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Measure {
    type Err = UqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sp" => Ok(Measure::SequenceProbability),
            "ppl" => Ok(Measure::Perplexity),
            "mte" => Ok(Measure::MeanTokenEntropy),
            _ => Err(UqError::UnknownMeasure(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub measure: Measure,
    pub value: f64,
}

fn neg_logprob_sum(scores: &[TokenScore]) -> Result<f64, UqError> {
    if scores.is_empty() {
        return Err(UqError::EmptyGeneration);
    }
    // 0.0 - x rather than -x so an all-zero sum yields +0.0
    Ok(0.0 - scores.iter().map(|s| s.chosen_logprob).sum::<f64>())
}

pub fn sequence_probability(scores: &[TokenScore]) -> Result<UncertaintyScore, UqError> {
    Ok(UncertaintyScore {
        measure: Measure::SequenceProbability,
        value: neg_logprob_sum(scores)?,
    })
}

pub fn perplexity(scores: &[TokenScore]) -> Result<UncertaintyScore, UqError> {
    let total = neg_logprob_sum(scores)?;
    Ok(UncertaintyScore {
        measure: Measure::Perplexity,
        value: total / scores.len() as f64,
    })
}

pub fn mean_token_entropy(scores: &[TokenScore]) -> Result<UncertaintyScore, UqError> {
    if scores.is_empty() {
        return Err(UqError::EmptyGeneration);
    }
    let total: f64 = scores.iter().map(|s| s.entropy).sum();
    Ok(UncertaintyScore {
        measure: Measure::MeanTokenEntropy,
        value: total / scores.len() as f64,
    })
}

/// Entropy in nats of a (possibly truncated) distribution.
///
/// Masses are renormalized to sum to one first, so a top-k slice of a
/// larger distribution is treated as the whole support.
pub fn entropy_from_distribution(probs: &[f64]) -> Result<f64, UqError> {
    if let Some(&bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(UqError::InvalidProbability(bad));
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(UqError::DegenerateDistribution);
    }
    let entropy = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum::<f64>();
    Ok(entropy.max(0.0))
}

/// Same as [`entropy_from_distribution`] for natural-log probabilities.
pub fn entropy_from_logprobs(logprobs: &[f64]) -> Result<f64, UqError> {
    if logprobs.iter().any(|lp| lp.is_nan() || *lp > 1e-9) {
        return Err(UqError::DegenerateDistribution);
    }
    let probs: Vec<f64> = logprobs.iter().map(|lp| lp.min(0.0).exp()).collect();
    entropy_from_distribution(&probs)
}
