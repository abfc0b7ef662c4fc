//! ROC-AUC with uncertainty as the score for the incorrect class.
//!
//! Both methods work in doubled integer units (a win counts 2, a tie 1), so
//! they agree bit for bit.

use super::{LabeledScore, MetricsError};

fn split(samples: &[LabeledScore]) -> Result<(u64, u64), MetricsError> {
    if let Some(s) = samples.iter().find(|s| !s.uncertainty.is_finite()) {
        return Err(MetricsError::NonFinite(s.uncertainty));
    }
    let pos = samples.iter().filter(|s| !s.correct).count() as u64;
    let neg = samples.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Rank-sum (Mann–Whitney) form with averaged ranks for ties.
pub fn roc_auc(samples: &[LabeledScore]) -> Result<f64, MetricsError> {
    let (pos, neg) = split(samples)?;
    let mut order: Vec<&LabeledScore> = samples.iter().collect();
    order.sort_by(|a, b| a.uncertainty.total_cmp(&b.uncertainty));
    // doubled rank sum of the incorrect class
    let mut rank_sum2: u128 = 0;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && order[j + 1].uncertainty == order[i].uncertainty {
            j += 1;
        }
        // ranks i+1..=j+1 average to (i+j+2)/2
        let doubled_rank = (i + j + 2) as u128;
        let incorrect = order[i..=j].iter().filter(|s| !s.correct).count() as u128;
        rank_sum2 += doubled_rank * incorrect;
        i = j + 1;
    }
    let pos = u128::from(pos);
    let wins2 = rank_sum2 - pos * (pos + 1);
    Ok(wins2 as f64 / (2 * pos * u128::from(neg)) as f64)
}

/// Direct count over every (incorrect, correct) pair.
pub fn roc_auc_pairs(samples: &[LabeledScore]) -> Result<f64, MetricsError> {
    let (pos, neg) = split(samples)?;
    let mut wins2: u128 = 0;
    for p in samples.iter().filter(|s| !s.correct) {
        for q in samples.iter().filter(|s| s.correct) {
            if p.uncertainty > q.uncertainty {
                wins2 += 2;
            } else if p.uncertainty == q.uncertainty {
                wins2 += 1;
            }
        }
    }
    Ok(wins2 as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64)
}
