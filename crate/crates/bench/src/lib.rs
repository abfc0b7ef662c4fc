//! Fixtures shared by the benchmarks.

use deferral_core::calibration::CalibrationTrace;
use deferral_core::gridworld::{self, GridState};
use deferral_core::metrics::LabeledScore;
use deferral_core::rng::{episode_seed, SplitMix64};
use deferral_core::uq::Measure;

/// Scores loosely correlated with correctness.
pub fn labeled_scores(n: usize, seed: u64) -> Vec<LabeledScore> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let u = rng.next_f64();
            LabeledScore::new(u, rng.next_f64() > u * 0.8)
        })
        .collect()
}

pub fn trace(episodes: usize, steps: usize, seed: u64) -> CalibrationTrace {
    let mut rng = SplitMix64::new(seed);
    let values = (0..episodes)
        .map(|_| (0..steps).map(|_| rng.next_f64() * 3.0).collect())
        .collect();
    CalibrationTrace::new(Measure::Perplexity, values).expect("non-empty trace")
}

pub fn grids(n: u64, size: u32) -> Vec<GridState> {
    (0..n)
        .map(|i| gridworld::generate(episode_seed(1, i), size).expect("generated grid"))
        .collect()
}
