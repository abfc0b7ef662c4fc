use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::rng::{mix_seed, SplitMix64};

pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessEstimate {
    pub rate: f64,
    pub bootstrap_std: f64,
    pub episodes: usize,
    pub resamples: usize,
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Bootstrap means of `values`. Resample `r` draws from its own generator,
/// so the result does not depend on scheduling.
pub fn bootstrap_means(values: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    let n = values.len() as u64;
    (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = SplitMix64::new(mix_seed(&[seed, r as u64]));
            let total: f64 = (0..n).map(|_| values[rng.below(n) as usize]).sum();
            total / n as f64
        })
        .collect()
}

pub fn success_rate(outcomes: &[bool], resamples: usize, seed: u64) -> Result<SuccessEstimate, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    if resamples < 2 {
        return Err(MetricsError::InvalidResamples(resamples));
    }
    let values: Vec<f64> = outcomes.iter().map(|&s| f64::from(u8::from(s))).collect();
    let rate = values.iter().sum::<f64>() / values.len() as f64;
    let (_, std) = mean_and_std(&bootstrap_means(&values, resamples, seed));
    Ok(SuccessEstimate {
        rate,
        bootstrap_std: std,
        episodes: outcomes.len(),
        resamples,
    })
}
