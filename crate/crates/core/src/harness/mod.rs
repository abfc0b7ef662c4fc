//! The operator workflow: calibrate on small-only episodes, run policies,
//! report, label.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! calibration/episodes.jsonl        small-only calibration episodes
//! calibration/trace_<m>.csv         episode, step, value
//! calibration/result_<m>.json       one CalibrationResult per measure
//! runs/<policy>.jsonl               one EpisodeRecord per line
//! reports/<log>.json                RunReport
//! reports/<log>_histogram.csv       step, reached, calls, frequency
//! reports/comparison.csv            one row per log (several logs only)
//! reports/pareto.csv                cost and calls fronts
//! labels/<log>.csv                  per-step scores and oracle label
//! labels/<log>_summary.json         PRR and ROC-AUC per stage and measure
//! labels/<log>_pr_curves.csv        rejection curves behind the PRR values
//! ```

pub mod config;
pub mod workflow;

pub use config::{ModelSpec, PolicyName, RunConfig, SyntheticSpec};
pub use workflow::{
    cmd_calibrate, cmd_label, cmd_report, cmd_run, load_config, read_log, CliError, Overrides,
    RunSummary, EXIT_FAILURE, EXIT_INFRA, EXIT_OK, EXIT_USAGE,
};
