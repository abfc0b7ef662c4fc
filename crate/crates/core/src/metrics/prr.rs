//! Prediction rejection ratio over accuracy-of-retained curves.
//!
//! Samples are rejected highest uncertainty first. A block of tied values is
//! rejected with each member counted at the block's mean correctness, which
//! is the average over all orderings of the block.

use serde::Serialize;

use super::{LabeledScore, MetricsError};

pub const DEFAULT_MAX_REJECTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionCurves {
    pub rejection_rate: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub oracle: Vec<f64>,
    pub random: Vec<f64>,
}

fn class_counts(samples: &[LabeledScore]) -> Result<(u64, u64), MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples(samples.len()));
    }
    if let Some(s) = samples.iter().find(|s| !s.uncertainty.is_finite()) {
        return Err(MetricsError::NonFinite(s.uncertainty));
    }
    let correct = samples.iter().filter(|s| s.correct).count() as u64;
    let n = samples.len() as u64;
    if correct == 0 || correct == n {
        return Err(MetricsError::DegenerateLabels);
    }
    Ok((n, correct))
}

/// Number of rejection steps on the grid `0..=J`.
fn grid_len(n: u64, max_rejection: f64) -> Result<u64, MetricsError> {
    if !(max_rejection > 0.0 && max_rejection <= 1.0) {
        return Err(MetricsError::InvalidRejection(max_rejection));
    }
    let j = ((n as f64) * max_rejection).floor() as u64;
    Ok(j.min(n - 1))
}

pub fn rejection_curves(samples: &[LabeledScore], max_rejection: f64) -> Result<RejectionCurves, MetricsError> {
    let (n, correct) = class_counts(samples)?;
    let last = grid_len(n, max_rejection)?;
    let incorrect = n - correct;

    let mut order: Vec<&LabeledScore> = samples.iter().collect();
    order.sort_by(|a, b| b.uncertainty.total_cmp(&a.uncertainty));
    // (size, correct) per tied block, highest uncertainty first
    let mut blocks: Vec<(u64, u64)> = Vec::new();
    for (i, s) in order.iter().enumerate() {
        if i > 0 && order[i - 1].uncertainty == s.uncertainty {
            let b = blocks.last_mut().expect("block started");
            b.0 += 1;
            b.1 += u64::from(s.correct);
        } else {
            blocks.push((1, u64::from(s.correct)));
        }
    }

    let mut curves = RejectionCurves {
        rejection_rate: Vec::new(),
        uncertainty: Vec::new(),
        oracle: Vec::new(),
        random: Vec::new(),
    };
    let base = correct as f64 / n as f64;
    let mut block = 0usize;
    let mut before_block = 0u64;
    let mut removed_before_block = 0u64;
    for j in 0..=last {
        while block < blocks.len() && before_block + blocks[block].0 <= j {
            before_block += blocks[block].0;
            removed_before_block += blocks[block].1;
            block += 1;
        }
        let retained = n - j;
        let partial = j - before_block;
        let q = if partial == 0 {
            (correct - removed_before_block) as f64 / retained as f64
        } else {
            let (size, c_b) = blocks[block];
            let num = u128::from(correct - removed_before_block) * u128::from(size)
                - u128::from(partial) * u128::from(c_b);
            num as f64 / (u128::from(size) * u128::from(retained)) as f64
        };
        let oracle = if j <= incorrect {
            correct as f64 / retained as f64
        } else {
            1.0
        };
        curves.rejection_rate.push(j as f64 / n as f64);
        curves.uncertainty.push(q);
        curves.oracle.push(oracle);
        curves.random.push(base);
    }
    Ok(curves)
}

/// Trapezoid area of `ys` over `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

impl RejectionCurves {
    pub fn prr(&self) -> f64 {
        let x = &self.rejection_rate;
        let unc = trapezoid(x, &self.uncertainty);
        let rnd = trapezoid(x, &self.random);
        let orc = trapezoid(x, &self.oracle);
        (unc - rnd) / (orc - rnd)
    }
}

pub fn prediction_rejection_ratio(samples: &[LabeledScore], max_rejection: f64) -> Result<f64, MetricsError> {
    Ok(rejection_curves(samples, max_rejection)?.prr())
}
