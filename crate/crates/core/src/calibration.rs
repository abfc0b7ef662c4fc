//! Threshold calibration on small-only episodes.
//!
//! Every observed uncertainty value, plus +∞, is a candidate τ. The number
//! of calls per episode at τ counts steps with `u > τ`, which can only fall
//! as τ grows, so the candidate closest to the target is found by binary
//! search over the sorted values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{EpisodeRecord, SCHEMA_VERSION};
use crate::float_repr;
use crate::uq::Measure;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("empty calibration trace")]
    EmptyTrace,
    #[error("trace not small-only (episode {0} has deferred steps)")]
    NotSmallOnly(u64),
    #[error("invalid uncertainty value {0} in trace")]
    InvalidValue(f64),
    #[error("K must be positive and finite, got {0}")]
    InvalidTarget(f64),
    #[error("cannot score step: {0}")]
    Scoring(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTrace {
    pub measure: Measure,
    /// One list of per-step values per episode.
    pub episodes: Vec<Vec<f64>>,
}

impl CalibrationTrace {
    pub fn new(measure: Measure, episodes: Vec<Vec<f64>>) -> Result<Self, CalibrationError> {
        if episodes.is_empty() {
            return Err(CalibrationError::EmptyTrace);
        }
        if let Some(&bad) = episodes
            .iter()
            .flatten()
            .find(|v| !v.is_finite() || **v < 0.0)
        {
            return Err(CalibrationError::InvalidValue(bad));
        }
        Ok(Self { measure, episodes })
    }

    pub fn n_cal(&self) -> usize {
        self.episodes.len()
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn mean_length(&self) -> f64 {
        self.total_steps() as f64 / self.n_cal() as f64
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.episodes.iter().flatten().copied()
    }
}

fn scores_of(record: &EpisodeRecord, measure: Measure) -> Result<Vec<f64>, CalibrationError> {
    record
        .steps
        .iter()
        .map(|s| {
            measure
                .score(&s.small_proposal.action_scores)
                .map(|u| u.value)
                .map_err(|e| CalibrationError::Scoring(e.to_string()))
        })
        .collect()
}

/// Small-model uncertainties of never-policy episodes. Episodes aborted by an
/// infrastructure failure are skipped.
pub fn collect_trace(records: &[EpisodeRecord], measure: Measure) -> Result<CalibrationTrace, CalibrationError> {
    let mut episodes = Vec::with_capacity(records.len());
    for r in records.iter().filter(|r| !r.is_diagnosed_failure()) {
        if r.large_calls > 0 || r.steps.iter().any(|s| s.deferred) {
            return Err(CalibrationError::NotSmallOnly(r.episode_id));
        }
        episodes.push(scores_of(r, measure)?);
    }
    CalibrationTrace::new(measure, episodes)
}

/// Small-model uncertainties of episodes run under any policy. Used by
/// warm-up recalibration, where deferrals change the visited states.
pub fn collect_realized_trace(
    records: &[EpisodeRecord],
    measure: Measure,
) -> Result<CalibrationTrace, CalibrationError> {
    let episodes = records
        .iter()
        .filter(|r| !r.is_diagnosed_failure())
        .map(|r| scores_of(r, measure))
        .collect::<Result<Vec<_>, _>>()?;
    CalibrationTrace::new(measure, episodes)
}

pub fn mean_calls_at(trace: &CalibrationTrace, tau: f64) -> f64 {
    let calls = trace.values().filter(|&u| u > tau).count();
    calls as f64 / trace.n_cal() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub schema_version: u32,
    #[serde(default)]
    pub config_hash: String,
    pub measure: Measure,
    #[serde(with = "float_repr")]
    pub tau: f64,
    pub k_target: f64,
    pub achieved_mean_calls: f64,
    pub p_random: f64,
    /// K/L̄ exceeded 1 and was clamped.
    pub p_random_clamped: bool,
    /// K exceeds the mean episode length.
    pub k_unreachable: bool,
    pub n_cal: usize,
    pub mean_length: f64,
    #[serde(default)]
    pub warmup_rounds: Vec<WarmupRound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupRound {
    #[serde(with = "float_repr")]
    pub tau: f64,
    pub realized_mean_calls: f64,
}

fn check_target(k: f64) -> Result<(), CalibrationError> {
    if k.is_finite() && k > 0.0 {
        Ok(())
    } else {
        Err(CalibrationError::InvalidTarget(k))
    }
}

/// Picks the candidate τ whose mean call count is closest to `k`; on a tie
/// the larger τ wins.
pub fn calibrate_threshold(trace: &CalibrationTrace, k: f64) -> Result<CalibrationResult, CalibrationError> {
    check_target(k)?;
    let mut sorted: Vec<f64> = trace.values().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let n_cal = trace.n_cal() as f64;

    let mut candidates: Vec<f64> = sorted.clone();
    candidates.dedup();
    candidates.push(f64::INFINITY);
    let calls_at = |tau: f64| -> f64 {
        let at_or_below = sorted.partition_point(|&v| v <= tau);
        (n - at_or_below) as f64 / n_cal
    };

    // first candidate with calls ≤ k; +∞ always qualifies
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if calls_at(candidates[mid]) <= k {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut best = lo;
    if lo > 0 {
        let below = (calls_at(candidates[lo - 1]) - k).abs();
        let here = (calls_at(candidates[lo]) - k).abs();
        if below < here {
            best = lo - 1;
        }
    }
    if best == lo {
        // largest candidate with the same call count
        let calls = calls_at(candidates[lo]);
        let (mut a, mut b) = (lo, candidates.len() - 1);
        while a < b {
            let mid = (a + b).div_ceil(2);
            if calls_at(candidates[mid]) == calls {
                a = mid;
            } else {
                b = mid - 1;
            }
        }
        best = a;
    }
    let tau = candidates[best];
    Ok(finish(trace, k, tau, calls_at(tau)))
}

/// Reference implementation: scans every candidate with [`mean_calls_at`].
pub fn calibrate_threshold_exhaustive(
    trace: &CalibrationTrace,
    k: f64,
) -> Result<CalibrationResult, CalibrationError> {
    check_target(k)?;
    let mut candidates: Vec<f64> = trace.values().collect();
    candidates.push(f64::INFINITY);
    let mut best: Option<(f64, f64, f64)> = None;
    for tau in candidates {
        let calls = mean_calls_at(trace, tau);
        let gap = (calls - k).abs();
        let better = match best {
            None => true,
            Some((g, t, _)) => gap < g || (gap == g && tau > t),
        };
        if better {
            best = Some((gap, tau, calls));
        }
    }
    let (_, tau, calls) = best.expect("candidate set contains +inf");
    Ok(finish(trace, k, tau, calls))
}

fn finish(trace: &CalibrationTrace, k: f64, tau: f64, achieved: f64) -> CalibrationResult {
    let mean_length = trace.mean_length();
    let raw_p = if mean_length > 0.0 { k / mean_length } else { f64::INFINITY };
    CalibrationResult {
        schema_version: SCHEMA_VERSION,
        config_hash: String::new(),
        measure: trace.measure,
        tau,
        k_target: k,
        achieved_mean_calls: achieved,
        p_random: raw_p.min(1.0),
        p_random_clamped: raw_p > 1.0,
        k_unreachable: k > mean_length,
        n_cal: trace.n_cal(),
        mean_length,
        warmup_rounds: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupOptions {
    pub episodes: usize,
    pub rounds: usize,
    pub tolerance: f64,
}

impl Default for WarmupOptions {
    fn default() -> Self {
        Self {
            episodes: 50,
            rounds: 3,
            tolerance: 0.25,
        }
    }
}

/// Re-fits τ on episodes run with deferral enabled. `run_warmup(tau)` must
/// run the warm-up episodes under a threshold policy at `tau`. Stops once
/// the realized call rate is within tolerance of K or the rounds run out.
pub fn recalibrate<E>(
    initial: CalibrationResult,
    options: WarmupOptions,
    mut run_warmup: impl FnMut(f64) -> Result<Vec<EpisodeRecord>, E>,
) -> Result<CalibrationResult, E>
where
    E: From<CalibrationError>,
{
    let k = initial.k_target;
    let mut current = initial;
    for _ in 0..options.rounds {
        let records = run_warmup(current.tau)?;
        let kept: Vec<&EpisodeRecord> = records.iter().filter(|r| !r.is_diagnosed_failure()).collect();
        if kept.is_empty() {
            return Err(CalibrationError::EmptyTrace.into());
        }
        let realized = kept.iter().map(|r| f64::from(r.large_calls)).sum::<f64>() / kept.len() as f64;
        current.warmup_rounds.push(WarmupRound {
            tau: current.tau,
            realized_mean_calls: realized,
        });
        if (realized - k).abs() < options.tolerance {
            break;
        }
        let trace = collect_realized_trace(&records, current.measure)?;
        let refit = calibrate_threshold(&trace, k)?;
        current = CalibrationResult {
            warmup_rounds: std::mem::take(&mut current.warmup_rounds),
            config_hash: std::mem::take(&mut current.config_hash),
            ..refit
        };
    }
    Ok(current)
}
