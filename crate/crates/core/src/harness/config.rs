//! Run configuration: one TOML document, unknown keys rejected.
//!
//! ```toml
//! output_dir = "out"
//!
//! [environment]
//! seed = 42              # test episodes
//! calibration_seed = 993 # calibration and warm-up episodes
//! size = 8
//! max_steps = 50
//!
//! [small]
//! kind = "synthetic"
//! name = "small-synthetic"
//! temperature = 0.55
//! noise_scale = 0.85
//! seed = 11
//! reasoning_noise = 0.5
//!
//! [large]
//! kind = "remote"
//! base_url = "https://api.example.com/v1"
//! model = "big-model"
//! api_key_env = "DEFERRAL_API_KEY"
//!
//! [calibration]
//! k_target = 5.0
//! episodes = 100
//!
//! [run]
//! episodes = 400
//! parallelism = 4
//! policies = ["never", "always", "random", "threshold-ppl"]
//! random_seed = 7
//!
//! [report]
//! bootstrap_resamples = 1000
//! bootstrap_seed = 0
//!
//! [prices.small-synthetic]
//! input = 0.15
//! output = 1.50
//! ```
//!
//! A remote model is named by its `model` field.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::EnvSpec;
use crate::calibration::WarmupOptions;
use crate::metrics::{PriceTable, DEFAULT_MAX_REJECTION, DEFAULT_RESAMPLES};
use crate::models::{PromptTemplates, RemoteEndpoint, SyntheticModelConfig};
use crate::uq::Measure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    #[serde(default = "default_test_seed")]
    pub seed: u64,
    #[serde(default = "default_calibration_seed")]
    pub calibration_seed: u64,
    #[serde(default = "default_size")]
    pub size: u32,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
}

fn default_test_seed() -> u64 {
    42
}
fn default_calibration_seed() -> u64 {
    993
}
fn default_size() -> u32 {
    crate::gridworld::DEFAULT_SIZE
}
fn default_max_steps() -> u32 {
    crate::gridworld::DEFAULT_MAX_STEPS
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            seed: default_test_seed(),
            calibration_seed: default_calibration_seed(),
            size: default_size(),
            max_steps: default_max_steps(),
        }
    }
}

impl EnvironmentConfig {
    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            size: self.size,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub temperature: f64,
    pub noise_scale: f64,
    pub seed: u64,
    #[serde(default = "default_reasoning_noise")]
    pub reasoning_noise: f64,
}

fn default_reasoning_noise() -> f64 {
    0.5
}

impl SyntheticSpec {
    pub fn params(&self) -> SyntheticModelConfig {
        SyntheticModelConfig {
            temperature: self.temperature,
            noise_scale: self.noise_scale,
            seed: self.seed,
            reasoning_noise: self.reasoning_noise,
        }
    }

    pub fn from_params(name: &str, p: SyntheticModelConfig) -> Self {
        Self {
            name: name.into(),
            temperature: p.temperature,
            noise_scale: p.noise_scale,
            seed: p.seed,
            reasoning_noise: p.reasoning_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Synthetic(SyntheticSpec),
    Remote(RemoteEndpoint),
}

impl ModelSpec {
    pub fn name(&self) -> &str {
        match self {
            ModelSpec::Synthetic(s) => &s.name,
            ModelSpec::Remote(r) => &r.model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "default_k")]
    pub k_target: f64,
    #[serde(default = "default_cal_episodes")]
    pub episodes: usize,
    /// Enables warm-up recalibration with deferral switched on.
    #[serde(default)]
    pub warmup: Option<WarmupOptions>,
}

fn default_k() -> f64 {
    5.0
}
fn default_cal_episodes() -> usize {
    100
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            k_target: default_k(),
            episodes: default_cal_episodes(),
            warmup: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyName {
    Never,
    Always,
    Random,
    Threshold(Measure),
}

impl PolicyName {
    pub const ALL: [PolicyName; 6] = [
        PolicyName::Never,
        PolicyName::Always,
        PolicyName::Random,
        PolicyName::Threshold(Measure::SequenceProbability),
        PolicyName::Threshold(Measure::Perplexity),
        PolicyName::Threshold(Measure::MeanTokenEntropy),
    ];

    pub fn needs_calibration(&self) -> bool {
        matches!(self, PolicyName::Random | PolicyName::Threshold(_))
    }

    /// Combines `--policy` with an optional `--measure`.
    pub fn resolve(policy: &str, measure: Option<&str>) -> Result<Self, String> {
        match (policy.parse::<PolicyName>()?, measure) {
            (PolicyName::Threshold(_), Some(m)) if policy.eq_ignore_ascii_case("threshold") => {
                let m: Measure = m.parse().map_err(|e| format!("{e}"))?;
                Ok(PolicyName::Threshold(m))
            }
            (PolicyName::Threshold(existing), Some(m)) => {
                let m: Measure = m.parse().map_err(|e| format!("{e}"))?;
                if m == existing {
                    Ok(PolicyName::Threshold(m))
                } else {
                    Err(format!("--measure {m} conflicts with policy {policy}"))
                }
            }
            (p, Some(_)) => Err(format!("--measure only applies to threshold policies, not {p}")),
            (p, None) => Ok(p),
        }
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyName::Never => f.write_str("never"),
            PolicyName::Always => f.write_str("always"),
            PolicyName::Random => f.write_str("random"),
            PolicyName::Threshold(m) => write!(f, "threshold-{}", m.short_name().to_lowercase()),
        }
    }
}

impl FromStr for PolicyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "never" => Ok(PolicyName::Never),
            "always" => Ok(PolicyName::Always),
            "random" => Ok(PolicyName::Random),
            // bare threshold defaults to perplexity
            "threshold" => Ok(PolicyName::Threshold(Measure::Perplexity)),
            _ => match lower.strip_prefix("threshold-") {
                Some(m) => m
                    .parse::<Measure>()
                    .map(PolicyName::Threshold)
                    .map_err(|e| e.to_string()),
                None => Err(format!(
                    "unknown policy {s:?} (expected never, always, random or threshold-<sp|ppl|mte>)"
                )),
            },
        }
    }
}

impl Serialize for PolicyName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_run_episodes")]
    pub episodes: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyName>,
    /// Seed of the random policy's per-episode coin.
    #[serde(default = "default_random_seed")]
    pub random_seed: u64,
}

fn default_run_episodes() -> usize {
    400
}
fn default_parallelism() -> usize {
    4
}
fn default_policies() -> Vec<PolicyName> {
    PolicyName::ALL.to_vec()
}
fn default_random_seed() -> u64 {
    7
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            episodes: default_run_episodes(),
            parallelism: default_parallelism(),
            policies: default_policies(),
            random_seed: default_random_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default)]
    pub bootstrap_seed: u64,
    #[serde(default = "default_max_rejection")]
    pub max_rejection: f64,
}

fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}
fn default_max_rejection() -> f64 {
    DEFAULT_MAX_REJECTION
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            bootstrap_resamples: default_resamples(),
            bootstrap_seed: 0,
            max_rejection: default_max_rejection(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub environment: EnvironmentConfig,
    pub small: ModelSpec,
    pub large: ModelSpec,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub prices: PriceTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PromptTemplates>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Both tiers synthetic, priced like a cheap and an expensive hosted model.
    pub fn synthetic_default() -> Self {
        let mut prices = PriceTable::default();
        prices.insert("small-synthetic", 0.15, 1.50);
        prices.insert("large-synthetic", 1.75, 14.00);
        Self {
            output_dir: default_output_dir(),
            environment: EnvironmentConfig::default(),
            small: ModelSpec::Synthetic(SyntheticSpec::from_params(
                "small-synthetic",
                SyntheticModelConfig::small_tier(),
            )),
            large: ModelSpec::Synthetic(SyntheticSpec::from_params(
                "large-synthetic",
                SyntheticModelConfig::large_tier(),
            )),
            calibration: CalibrationConfig::default(),
            run: RunSection::default(),
            report: ReportConfig::default(),
            prices,
            prompts: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let config: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        let env = &self.environment;
        if env.size < 5 {
            return Err(format!("environment.size must be at least 5, got {}", env.size));
        }
        if env.max_steps == 0 {
            return Err("environment.max_steps must be positive".into());
        }
        if env.seed == env.calibration_seed {
            return Err("environment.seed and environment.calibration_seed must differ".into());
        }
        for (tier, spec) in [("small", &self.small), ("large", &self.large)] {
            match spec {
                ModelSpec::Synthetic(s) => {
                    if s.name.trim().is_empty() {
                        return Err(format!("{tier}.name is empty"));
                    }
                    s.params().validate().map_err(|e| format!("{tier}: {e}"))?;
                }
                ModelSpec::Remote(r) => {
                    if r.base_url.trim().is_empty() || r.model.trim().is_empty() {
                        return Err(format!("{tier}: base_url and model are required"));
                    }
                    if r.top_logprobs == 0 || r.max_attempts == 0 {
                        return Err(format!("{tier}: top_logprobs and max_attempts must be positive"));
                    }
                    if !(r.temperature >= 0.0 && r.temperature.is_finite()) {
                        return Err(format!("{tier}: temperature must be nonnegative"));
                    }
                }
            }
            if !self.prices.0.contains_key(spec.name()) {
                return Err(format!("unpriced model {:?} (add [prices.\"{}\"])", spec.name(), spec.name()));
            }
        }
        if self.small.name() == self.large.name() {
            return Err(format!("model names must be unique, both are {:?}", self.small.name()));
        }
        self.prices.validate().map_err(|e| e.to_string())?;
        let k = self.calibration.k_target;
        if !(k > 0.0 && k.is_finite()) {
            return Err(format!("calibration.k_target must be positive, got {k}"));
        }
        if self.calibration.episodes == 0 {
            return Err("calibration.episodes must be positive".into());
        }
        if let Some(w) = &self.calibration.warmup {
            if w.episodes == 0 || w.rounds == 0 || !(w.tolerance > 0.0) {
                return Err("calibration.warmup needs positive episodes, rounds and tolerance".into());
            }
        }
        if self.run.episodes == 0 {
            return Err("run.episodes must be positive".into());
        }
        if self.run.parallelism == 0 {
            return Err("run.parallelism must be positive".into());
        }
        if self.run.policies.is_empty() {
            return Err("run.policies is empty".into());
        }
        if self.report.bootstrap_resamples < 2 {
            return Err("report.bootstrap_resamples must be at least 2".into());
        }
        let r = self.report.max_rejection;
        if !(r > 0.0 && r <= 1.0) {
            return Err(format!("report.max_rejection must be in (0, 1], got {r}"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring settings that cannot
    /// change results (output location and worker count).
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.run.parallelism = 0;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn templates(&self) -> PromptTemplates {
        self.prompts.clone().unwrap_or_default()
    }
}
