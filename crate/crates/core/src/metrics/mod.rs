//! Success rates, PRR, ROC-AUC, call histograms, costs and Pareto fronts.

pub mod bootstrap;
pub mod cost;
pub mod prr;
pub mod roc;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{EpisodeRecord, SCHEMA_VERSION};
use crate::models::TokenCounts;

pub use bootstrap::{mean_and_std, success_rate, SuccessEstimate, DEFAULT_RESAMPLES};
pub use cost::{cost_of, CostBreakdown, Price, PriceTable};
pub use prr::{prediction_rejection_ratio, rejection_curves, RejectionCurves, DEFAULT_MAX_REJECTION};
pub use roc::{roc_auc, roc_auc_pairs};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate labels")]
    DegenerateLabels,
    #[error("non-finite uncertainty {0}")]
    NonFinite(f64),
    #[error("max rejection must be in (0, 1], got {0}")]
    InvalidRejection(f64),
    #[error("need at least 2 bootstrap resamples, got {0}")]
    InvalidResamples(usize),
    #[error("unpriced model {0:?}")]
    UnpricedModel(String),
    #[error("invalid price for {0:?}")]
    InvalidPrice(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub uncertainty: f64,
    pub correct: bool,
}

impl LabeledScore {
    pub fn new(uncertainty: f64, correct: bool) -> Self {
        Self { uncertainty, correct }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub step: u32,
    pub reached: usize,
    pub calls: usize,
    pub frequency: f64,
}

/// Per step index: episodes deferring at that step over episodes reaching it.
pub fn call_frequency_histogram(records: &[EpisodeRecord]) -> Vec<HistogramBin> {
    let max_len = records.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    let mut reached = vec![0usize; max_len];
    let mut calls = vec![0usize; max_len];
    for r in records {
        for (t, step) in r.steps.iter().enumerate() {
            reached[t] += 1;
            calls[t] += usize::from(step.deferred);
        }
    }
    (0..max_len)
        .map(|t| HistogramBin {
            step: t as u32 + 1,
            reached: reached[t],
            calls: calls[t],
            frequency: calls[t] as f64 / reached[t] as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub cost: f64,
    pub success: f64,
    pub label: String,
}

fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.cost <= b.cost && a.success >= b.success && (a.cost < b.cost || a.success > b.success)
}

/// Points no other point dominates, ordered by cost.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(b.success.total_cmp(&a.success)));
    let mut front: Vec<ParetoPoint> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        // group equal costs; only the top success of the group can survive
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].cost == sorted[i].cost {
            j += 1;
        }
        let top = sorted[i].success;
        if top > best {
            front.extend(
                sorted[i..=j]
                    .iter()
                    .filter(|p| p.success == top)
                    .map(|p| (*p).clone()),
            );
            best = top;
        }
        i = j + 1;
    }
    front
}

/// Quadratic reference for [`pareto_front`].
pub fn pareto_front_naive(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(q, p)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub policy: String,
    pub episodes: usize,
    /// Episodes aborted by infrastructure failures, left out of every rate.
    pub excluded_failures: usize,
    pub success: SuccessEstimate,
    pub mean_large_calls: f64,
    pub std_large_calls: f64,
    /// Absent when no episode succeeded.
    pub mean_steps_to_success: Option<f64>,
    pub std_steps_to_success: Option<f64>,
    pub tokens: BTreeMap<String, TokenCounts>,
    pub cost: CostBreakdown,
    pub histogram: Vec<HistogramBin>,
}

pub fn build_report(
    records: &[EpisodeRecord],
    prices: &PriceTable,
    resamples: usize,
    seed: u64,
) -> Result<RunReport, MetricsError> {
    let kept: Vec<EpisodeRecord> = records.iter().filter(|r| !r.is_diagnosed_failure()).cloned().collect();
    if kept.is_empty() {
        return Err(MetricsError::Empty);
    }
    let outcomes: Vec<bool> = kept.iter().map(EpisodeRecord::success).collect();
    let success = success_rate(&outcomes, resamples, seed)?;
    let calls: Vec<f64> = kept.iter().map(|r| f64::from(r.large_calls)).collect();
    let (mean_large_calls, std_large_calls) = mean_and_std(&calls);
    let steps: Vec<f64> = kept
        .iter()
        .filter(|r| r.success())
        .map(|r| r.steps.len() as f64)
        .collect();
    let (mean_steps, std_steps) = if steps.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_and_std(&steps);
        (Some(m), Some(s))
    };

    let mut tokens: BTreeMap<String, TokenCounts> = BTreeMap::new();
    for r in records {
        for (name, &t) in &r.totals {
            *tokens.entry(name.clone()).or_default() += t;
        }
    }
    let cost = cost_of(&tokens, prices)?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        config_hash: kept[0].config_hash.clone(),
        policy: kept[0].policy.label(),
        episodes: kept.len(),
        excluded_failures: records.len() - kept.len(),
        success,
        mean_large_calls,
        std_large_calls,
        mean_steps_to_success: mean_steps,
        std_steps_to_success: std_steps,
        tokens,
        cost,
        histogram: call_frequency_histogram(&kept),
    })
}
