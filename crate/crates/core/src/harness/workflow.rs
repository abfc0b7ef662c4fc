use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use super::config::{ModelSpec, PolicyName, RunConfig};
use crate::agent::{run_batch, DeferralPolicy, EpisodeRecord, SCHEMA_VERSION};
use crate::calibration::{self, CalibrationResult};
use crate::metrics::{
    self, build_report, pareto_front, rejection_curves, roc_auc, LabeledScore, ParetoPoint,
    PriceTable, RunReport,
};
use crate::models::{
    DecisionModel, ModelId, PromptTemplates, RemoteModel, SyntheticModel, Tier, UreqTransport,
};
use crate::rng::episode_seed;
use crate::uq::Measure;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFRA: i32 = 3;

/// Share of infrastructure-failed episodes above which a command fails.
pub const INFRA_FAILURE_LIMIT: f64 = 0.2;

const REMOTE_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::failure(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Command-line settings that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub seed: Option<u64>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut config: RunConfig =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if let Some(out) = &overrides.out {
        config.output_dir = out.clone();
    }
    if let Some(p) = overrides.parallelism {
        config.run.parallelism = p;
    }
    if let Some(seed) = overrides.seed {
        config.environment.seed = seed;
    }
    config
        .validate()
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn build_model(spec: &ModelSpec, tier: Tier, templates: &PromptTemplates) -> Result<Box<dyn DecisionModel>, CliError> {
    let id = ModelId::new(spec.name(), tier);
    match spec {
        ModelSpec::Synthetic(s) => Ok(Box::new(
            SyntheticModel::new(id, s.params())
                .map_err(|e| CliError::usage(e.to_string()))?
                .with_templates(templates.clone()),
        )),
        ModelSpec::Remote(endpoint) => {
            let transport = Arc::new(UreqTransport::new(REMOTE_TIMEOUT));
            Ok(Box::new(
                RemoteModel::from_env(id, endpoint.clone(), transport).with_templates(templates.clone()),
            ))
        }
    }
}

struct Models {
    small: Box<dyn DecisionModel>,
    large: Box<dyn DecisionModel>,
}

fn build_models(config: &RunConfig) -> Result<Models, CliError> {
    let templates = config.templates();
    Ok(Models {
        small: build_model(&config.small, Tier::Small, &templates)?,
        large: build_model(&config.large, Tier::Large, &templates)?,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Append-only JSON-lines sink; every record goes out in one write.
struct JsonlSink {
    path: PathBuf,
    file: File,
}

impl JsonlSink {
    fn create(path: &Path) -> Result<Self, CliError> {
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    fn append(&mut self, record: &EpisodeRecord) -> Result<(), CliError> {
        let mut line = serde_json::to_string(record).map_err(|e| CliError::io(&self.path, e))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| CliError::io(&self.path, e))
    }
}

/// Runs `seeds` in pool-sized chunks and logs each chunk in seed order, so
/// an interrupted run leaves a valid prefix.
fn run_logged(
    config: &RunConfig,
    models: &Models,
    seeds: &[u64],
    policy: &DeferralPolicy,
    log: &Path,
) -> Result<Vec<EpisodeRecord>, CliError> {
    let hash = config.config_hash();
    let parallelism = config.run.parallelism;
    let mut sink = JsonlSink::create(log)?;
    let mut all = Vec::with_capacity(seeds.len());
    let chunk = parallelism.max(1) * 4;
    for (c, part) in seeds.chunks(chunk).enumerate() {
        let records = run_batch(
            part,
            config.environment.spec(),
            models.small.as_ref(),
            models.large.as_ref(),
            policy,
            parallelism,
        )
        .map_err(|e| CliError::usage(e.to_string()))?;
        for (i, mut r) in records.into_iter().enumerate() {
            r.episode_id = (c * chunk + i) as u64;
            r.config_hash = hash.clone();
            sink.append(&r)?;
            all.push(r);
        }
    }
    Ok(all)
}

fn check_infra(records: &[EpisodeRecord], what: &str) -> Result<(), CliError> {
    let failed = records.iter().filter(|r| r.is_diagnosed_failure()).count();
    let rate = failed as f64 / records.len().max(1) as f64;
    if rate > INFRA_FAILURE_LIMIT {
        let first = records
            .iter()
            .find_map(|r| r.failure.clone())
            .unwrap_or_default();
        return Err(CliError {
            code: EXIT_INFRA,
            message: format!(
                "{what}: {failed} of {} episodes failed on infrastructure (limit {:.0}%); first: {first}",
                records.len(),
                INFRA_FAILURE_LIMIT * 100.0
            ),
        });
    }
    Ok(())
}

fn measure_slug(m: Measure) -> String {
    m.short_name().to_lowercase()
}

pub fn calibration_path(config: &RunConfig, measure: Measure) -> PathBuf {
    config
        .output_dir
        .join("calibration")
        .join(format!("result_{}.json", measure_slug(measure)))
}

#[derive(Serialize)]
struct TraceRow {
    episode: usize,
    step: usize,
    value: f64,
}

/// Calibration and warm-up episodes draw from the calibration namespace;
/// warm-up round `r` continues after the calibration episodes.
fn calibration_seeds(config: &RunConfig, start: usize, count: usize) -> Vec<u64> {
    (start..start + count)
        .map(|i| episode_seed(config.environment.calibration_seed, i as u64))
        .collect()
}

pub fn cmd_calibrate(config: &RunConfig) -> Result<Vec<CalibrationResult>, CliError> {
    let models = build_models(config)?;
    let dir = config.output_dir.join("calibration");
    create_dir(&dir)?;
    let n_cal = config.calibration.episodes;
    let seeds = calibration_seeds(config, 0, n_cal);
    let records = run_logged(config, &models, &seeds, &DeferralPolicy::Never, &dir.join("episodes.jsonl"))?;
    check_infra(&records, "calibration")?;

    let hash = config.config_hash();
    let k = config.calibration.k_target;
    let mut results = Vec::new();
    for measure in Measure::ALL {
        let trace = calibration::collect_trace(&records, measure).map_err(|e| CliError::failure(e.to_string()))?;
        let rows: Vec<TraceRow> = trace
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, vals)| {
                vals.iter().enumerate().map(move |(s, &value)| TraceRow {
                    episode: e,
                    step: s + 1,
                    value,
                })
            })
            .collect();
        write_csv(&dir.join(format!("trace_{}.csv", measure_slug(measure))), &rows)?;

        let mut result = calibration::calibrate_threshold(&trace, k).map_err(|e| CliError::usage(e.to_string()))?;
        if let Some(options) = config.calibration.warmup {
            let mut round = 0usize;
            result = calibration::recalibrate(result, options, |tau| {
                let start = n_cal + round * options.episodes;
                round += 1;
                let seeds = calibration_seeds(config, start, options.episodes);
                let policy = DeferralPolicy::Threshold { measure, tau };
                let log = dir.join(format!("warmup_{}_{round}.jsonl", measure_slug(measure)));
                let recs = run_logged(config, &models, &seeds, &policy, &log)?;
                check_infra(&recs, "warm-up")?;
                Ok::<_, CliError>(recs)
            })?;
        }
        result.config_hash = hash.clone();
        write_json(&calibration_path(config, measure), &result)?;
        results.push(result);
    }
    Ok(results)
}

impl From<calibration::CalibrationError> for CliError {
    fn from(e: calibration::CalibrationError) -> Self {
        CliError::failure(e.to_string())
    }
}

pub fn load_calibration(config: &RunConfig, measure: Measure) -> Result<CalibrationResult, CliError> {
    let path = calibration_path(config, measure);
    let text = fs::read_to_string(&path).map_err(|_| {
        CliError::usage(format!(
            "missing calibration {} (run `calibrate` first)",
            path.display()
        ))
    })?;
    let result: CalibrationResult =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if result.schema_version != SCHEMA_VERSION {
        return Err(CliError::usage(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            result.schema_version
        )));
    }
    Ok(result)
}

pub fn resolve_policy(config: &RunConfig, name: PolicyName) -> Result<DeferralPolicy, CliError> {
    Ok(match name {
        PolicyName::Never => DeferralPolicy::Never,
        PolicyName::Always => DeferralPolicy::Always,
        PolicyName::Random => {
            // p = K/L̄ does not depend on the measure
            let cal = load_calibration(config, Measure::Perplexity)?;
            DeferralPolicy::Random {
                p_defer: cal.p_random,
                seed: config.run.random_seed,
            }
        }
        PolicyName::Threshold(measure) => {
            let cal = load_calibration(config, measure)?;
            DeferralPolicy::Threshold { measure, tau: cal.tau }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub policy: String,
    pub log: PathBuf,
    pub episodes: usize,
    pub excluded_failures: usize,
    pub success_rate: f64,
    pub bootstrap_std: f64,
    pub mean_large_calls: f64,
    pub total_cost: f64,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: success {:.3} ± {:.3}, large calls {:.2}/episode, cost ${:.2} ({} episodes, {} excluded) -> {}",
            self.policy,
            self.success_rate,
            self.bootstrap_std,
            self.mean_large_calls,
            self.total_cost,
            self.episodes,
            self.excluded_failures,
            self.log.display()
        )
    }
}

pub fn run_log_path(config: &RunConfig, name: PolicyName) -> PathBuf {
    config.output_dir.join("runs").join(format!("{name}.jsonl"))
}

pub fn cmd_run(config: &RunConfig, name: PolicyName) -> Result<RunSummary, CliError> {
    let policy = resolve_policy(config, name)?;
    if name.needs_calibration() {
        let cal = load_calibration(config, Measure::Perplexity)?;
        if cal.config_hash != config.config_hash() {
            eprintln!("warning: calibration was produced by a different configuration");
        }
    }
    let models = build_models(config)?;
    let seeds: Vec<u64> = (0..config.run.episodes as u64)
        .map(|i| episode_seed(config.environment.seed, i))
        .collect();
    let log = run_log_path(config, name);
    let records = run_logged(config, &models, &seeds, &policy, &log)?;
    check_infra(&records, "run")?;
    let report = report_for(&records, &config.prices, config)?;
    Ok(RunSummary {
        policy: name.to_string(),
        log,
        episodes: report.episodes,
        excluded_failures: report.excluded_failures,
        success_rate: report.success.rate,
        bootstrap_std: report.success.bootstrap_std,
        mean_large_calls: report.mean_large_calls,
        total_cost: report.cost.total,
    })
}

fn report_for(records: &[EpisodeRecord], prices: &PriceTable, config: &RunConfig) -> Result<RunReport, CliError> {
    build_report(
        records,
        prices,
        config.report.bootstrap_resamples,
        config.report.bootstrap_seed,
    )
    .map_err(|e| CliError::failure(e.to_string()))
}

/// Reads an episode log, rejecting records from another schema version.
pub fn read_log(path: &Path) -> Result<Vec<EpisodeRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| CliError::usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(u64::from(SCHEMA_VERSION)) {
            return Err(CliError::usage(format!(
                "{}:{}: schema version {} (expected {SCHEMA_VERSION})",
                path.display(),
                i + 1,
                version.map_or("missing".to_string(), |v| v.to_string())
            )));
        }
        records.push(
            serde_json::from_value(value)
                .map_err(|e| CliError::usage(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    if records.is_empty() {
        return Err(CliError::usage(format!("{}: no episodes", path.display())));
    }
    Ok(records)
}

fn log_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "log".into())
}

#[derive(Serialize)]
struct ComparisonRow {
    log: String,
    policy: String,
    episodes: usize,
    excluded_failures: usize,
    success_rate: String,
    bootstrap_std: String,
    mean_large_calls: f64,
    std_large_calls: f64,
    total_cost_usd: String,
}

#[derive(Serialize)]
struct ParetoRow {
    axis: &'static str,
    label: String,
    x: f64,
    success: f64,
    on_front: bool,
}

pub fn cmd_report(config: &RunConfig, logs: &[PathBuf]) -> Result<Vec<RunReport>, CliError> {
    if logs.is_empty() {
        return Err(CliError::usage("report needs at least one log file"));
    }
    let dir = config.output_dir.join("reports");
    create_dir(&dir)?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for log in logs {
        let records = read_log(log)?;
        let report = report_for(&records, &config.prices, config)?;
        let stem = log_stem(log);
        write_json(&dir.join(format!("{stem}.json")), &report)?;
        write_csv(&dir.join(format!("{stem}_histogram.csv")), &report.histogram)?;
        rows.push(ComparisonRow {
            log: stem,
            policy: report.policy.clone(),
            episodes: report.episodes,
            excluded_failures: report.excluded_failures,
            success_rate: format!("{:.3}", report.success.rate),
            bootstrap_std: format!("{:.3}", report.success.bootstrap_std),
            mean_large_calls: report.mean_large_calls,
            std_large_calls: report.std_large_calls,
            total_cost_usd: metrics::cost::usd(report.cost.total),
        });
        reports.push(report);
    }
    if reports.len() > 1 {
        write_csv(&dir.join("comparison.csv"), &rows)?;
        let mut pareto_rows = Vec::new();
        for (axis, x_of) in [
            ("cost_usd", (|r: &RunReport| r.cost.total) as fn(&RunReport) -> f64),
            ("large_calls", |r: &RunReport| r.mean_large_calls),
        ] {
            let points: Vec<ParetoPoint> = reports
                .iter()
                .zip(&rows)
                .map(|(r, row)| ParetoPoint {
                    cost: x_of(r),
                    success: r.success.rate,
                    label: row.log.clone(),
                })
                .collect();
            let front = pareto_front(&points);
            for p in points {
                pareto_rows.push(ParetoRow {
                    axis,
                    on_front: front.iter().any(|f| f.label == p.label),
                    label: p.label,
                    x: p.cost,
                    success: p.success,
                });
            }
        }
        write_csv(&dir.join("pareto.csv"), &pareto_rows)?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelRow {
    pub episode_id: u64,
    pub step_index: u32,
    pub action: String,
    pub correct: u8,
    pub action_sp: f64,
    pub action_ppl: f64,
    pub action_mte: f64,
    pub reasoning_sp: f64,
    pub reasoning_ppl: f64,
    pub reasoning_mte: f64,
}

impl LabelRow {
    pub fn score(&self, stage: Stage, measure: Measure) -> f64 {
        match (stage, measure) {
            (Stage::Action, Measure::SequenceProbability) => self.action_sp,
            (Stage::Action, Measure::Perplexity) => self.action_ppl,
            (Stage::Action, Measure::MeanTokenEntropy) => self.action_mte,
            (Stage::Reasoning, Measure::SequenceProbability) => self.reasoning_sp,
            (Stage::Reasoning, Measure::Perplexity) => self.reasoning_ppl,
            (Stage::Reasoning, Measure::MeanTokenEntropy) => self.reasoning_mte,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Action,
    Reasoning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageScore {
    pub stage: Stage,
    pub measure: Measure,
    /// Absent when the labels are single-class.
    pub prr: Option<f64>,
    pub roc_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub steps: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub max_rejection: f64,
    pub scores: Vec<StageScore>,
}

#[derive(Serialize)]
struct CurveRow {
    stage: Stage,
    measure: Measure,
    rejection_rate: f64,
    uncertainty: f64,
    oracle: f64,
    random: f64,
}

/// Labels every small-model proposal in a log with the planner oracle.
pub fn label_rows(records: &[EpisodeRecord]) -> Result<Vec<LabelRow>, CliError> {
    let mut rows = Vec::new();
    for r in records {
        for s in &r.steps {
            let state = s.state_before.as_ref().ok_or_else(|| {
                CliError::usage(format!(
                    "unlabelable: episode {} step {} has no stored state",
                    r.episode_id, s.step_index
                ))
            })?;
            let p = &s.small_proposal;
            let score = |scores: &[crate::uq::TokenScore], m: Measure| {
                m.score(scores)
                    .map(|u| u.value)
                    .map_err(|e| CliError::failure(format!("episode {} step {}: {e}", r.episode_id, s.step_index)))
            };
            rows.push(LabelRow {
                episode_id: r.episode_id,
                step_index: s.step_index,
                action: p.action.to_string(),
                correct: crate::agent::label_step(state, p.action),
                action_sp: score(&p.action_scores, Measure::SequenceProbability)?,
                action_ppl: score(&p.action_scores, Measure::Perplexity)?,
                action_mte: score(&p.action_scores, Measure::MeanTokenEntropy)?,
                reasoning_sp: score(&p.reasoning_scores, Measure::SequenceProbability)?,
                reasoning_ppl: score(&p.reasoning_scores, Measure::Perplexity)?,
                reasoning_mte: score(&p.reasoning_scores, Measure::MeanTokenEntropy)?,
            });
        }
    }
    Ok(rows)
}

pub fn summarize_labels(rows: &[LabelRow], max_rejection: f64, config_hash: &str) -> (LabelSummary, Vec<RejectionRows>) {
    let correct = rows.iter().filter(|r| r.correct == 1).count();
    let mut scores = Vec::new();
    let mut curves = Vec::new();
    for stage in [Stage::Action, Stage::Reasoning] {
        for measure in Measure::ALL {
            let samples: Vec<LabeledScore> = rows
                .iter()
                .map(|r| LabeledScore::new(r.score(stage, measure), r.correct == 1))
                .collect();
            let c = rejection_curves(&samples, max_rejection).ok();
            scores.push(StageScore {
                stage,
                measure,
                prr: c.as_ref().map(|c| c.prr()),
                roc_auc: roc_auc(&samples).ok(),
            });
            if let Some(c) = c {
                curves.push(RejectionRows { stage, measure, curves: c });
            }
        }
    }
    let summary = LabelSummary {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        steps: rows.len(),
        correct,
        incorrect: rows.len() - correct,
        max_rejection,
        scores,
    };
    (summary, curves)
}

pub struct RejectionRows {
    pub stage: Stage,
    pub measure: Measure,
    pub curves: metrics::RejectionCurves,
}

pub fn cmd_label(config: &RunConfig, log: &Path) -> Result<LabelSummary, CliError> {
    let records = read_log(log)?;
    let rows = label_rows(&records)?;
    let dir = config.output_dir.join("labels");
    create_dir(&dir)?;
    let stem = log_stem(log);
    write_csv(&dir.join(format!("{stem}.csv")), &rows)?;
    let hash = records[0].config_hash.clone();
    let (summary, curves) = summarize_labels(&rows, config.report.max_rejection, &hash);
    let curve_rows: Vec<CurveRow> = curves
        .iter()
        .flat_map(|c| {
            (0..c.curves.rejection_rate.len()).map(move |i| CurveRow {
                stage: c.stage,
                measure: c.measure,
                rejection_rate: c.curves.rejection_rate[i],
                uncertainty: c.curves.uncertainty[i],
                oracle: c.curves.oracle[i],
                random: c.curves.random[i],
            })
        })
        .collect();
    write_csv(&dir.join(format!("{stem}_pr_curves.csv")), &curve_rows)?;
    write_json(&dir.join(format!("{stem}_summary.json")), &summary)?;
    Ok(summary)
}
