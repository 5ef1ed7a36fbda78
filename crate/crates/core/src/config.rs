//! Run configuration: a TOML file with CLI flag overrides (flags win).
//!
//! Exactly one of `[data]` (paths to precomputed probability files) or
//! `[synthetic]` (a generated task) must be present. Every output file
//! embeds the SHA-256 hash of the effective configuration so `verify` can
//! re-derive and check provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{FileFormat, StratifyBy};
use crate::error::{Error, Result};
use crate::humansim::{HumanModel, SyntheticTaskSpec};
use crate::scores::{ScoreConfig, ScoreKind, UMode};
use crate::setpred::PredictOptions;
use crate::tuning::TuneSpec;

/// Set-prediction method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Marginal,
    Mondrian,
    Avgk,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(Method::Marginal),
            "mondrian" => Ok(Method::Mondrian),
            "avgk" => Ok(Method::Avgk),
            other => Err(Error::Parameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Paths to precomputed probability datasets, one file per split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub calval: Option<PathBuf>,
    pub cal: Option<PathBuf>,
    pub test: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: FileFormat,
    /// Optional names sidecar (`{"groups": [...], "classes": [...]}`).
    pub names: Option<PathBuf>,
}

fn default_format() -> FileFormat {
    FileFormat::Csv
}

/// Synthetic-task section; the run seed keys the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub m: usize,
    pub n_groups: usize,
    pub group_weights: Vec<f64>,
    pub group_accuracy: Vec<f64>,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    pub n: usize,
}

fn default_concentration() -> f64 {
    8.0
}

impl SyntheticConfig {
    pub fn to_spec(&self, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            m: self.m,
            n_groups: self.n_groups,
            group_weights: self.group_weights.clone(),
            group_accuracy: self.group_accuracy.clone(),
            concentration: self.concentration,
            n: self.n,
            seed,
        }
    }
}

/// How a synthetic task is split into (calval, cal, test).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default = "default_stratify")]
    pub stratify: StratifyBy,
}

fn default_fractions() -> [f64; 3] {
    [0.2, 0.4, 0.4]
}

fn default_stratify() -> StratifyBy {
    StratifyBy::Group
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            stratify: default_stratify(),
        }
    }
}

/// Score-function section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    #[serde(default = "default_kind")]
    pub kind: ScoreKind,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_k_reg")]
    pub k_reg: usize,
    #[serde(default = "default_randomized")]
    pub randomized: bool,
    #[serde(default)]
    pub u_mode: UMode,
}

fn default_kind() -> ScoreKind {
    ScoreKind::Lac
}
fn default_temperature() -> f64 {
    1.0
}
fn default_k_reg() -> usize {
    1
}
fn default_randomized() -> bool {
    true
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            temperature: default_temperature(),
            lambda: 0.0,
            k_reg: default_k_reg(),
            randomized: default_randomized(),
            u_mode: UMode::default(),
        }
    }
}

impl ScoreSection {
    pub fn to_score_config(&self) -> ScoreConfig {
        ScoreConfig {
            kind: self.kind,
            temperature: self.temperature,
            lambda: self.lambda,
            k_reg: self.k_reg,
            randomized: self.randomized,
            u_mode: self.u_mode,
        }
    }
}

/// Tuning section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    #[serde(default = "default_target_coverage")]
    pub target_coverage: f64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_t_range")]
    pub t_range: (f64, f64),
    #[serde(default = "default_lambda_range")]
    pub lambda_range: (f64, f64),
    /// Defaults to `(1, m)` at runtime when absent.
    pub k_reg_range: Option<(usize, usize)>,
    #[serde(default = "default_randomized")]
    pub randomized: bool,
}

fn default_target_coverage() -> f64 {
    0.9
}
fn default_budget() -> usize {
    50
}
fn default_t_range() -> (f64, f64) {
    (0.05, 5.0)
}
fn default_lambda_range() -> (f64, f64) {
    (1e-3, 20.0)
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            target_coverage: default_target_coverage(),
            budget: default_budget(),
            t_range: default_t_range(),
            lambda_range: default_lambda_range(),
            k_reg_range: None,
            randomized: default_randomized(),
        }
    }
}

impl TuneSection {
    pub fn to_tune_spec(&self, m: usize, seed: u64, min_group_n: usize) -> TuneSpec {
        TuneSpec {
            target_coverage: self.target_coverage,
            t_range: self.t_range,
            lambda_range: self.lambda_range,
            k_reg_range: self.k_reg_range.unwrap_or((1, m.max(1))),
            budget: self.budget,
            seed,
            randomized: self.randomized,
            min_group_n,
        }
    }
}

/// Human-model section; the run seed keys the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanSection {
    pub skill: Vec<f64>,
    #[serde(default = "default_reliance")]
    pub reliance: f64,
    #[serde(default = "default_participants")]
    pub participants: usize,
    #[serde(default = "default_trials")]
    pub trials_per_participant: usize,
}

fn default_reliance() -> f64 {
    0.8
}
fn default_participants() -> usize {
    400
}
fn default_trials() -> usize {
    50
}

impl HumanSection {
    pub fn to_human_model(&self, seed: u64) -> HumanModel {
        HumanModel {
            skill: self.skill.clone(),
            reliance: self.reliance,
            seed,
        }
    }
}

/// Prediction-time options section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    #[serde(default = "default_force_nonempty")]
    pub force_nonempty: bool,
    #[serde(default)]
    pub randomize_ties: bool,
}

fn default_force_nonempty() -> bool {
    true
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            force_nonempty: true,
            randomize_ties: false,
        }
    }
}

impl PredictSection {
    pub fn to_options(&self) -> PredictOptions {
        PredictOptions {
            force_nonempty: self.force_nonempty,
            randomize_ties: self.randomize_ties,
        }
    }
}

/// Mondrian section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MondrianSection {
    #[serde(default = "default_min_group_n")]
    pub min_group_n: usize,
}

fn default_min_group_n() -> usize {
    30
}

impl Default for MondrianSection {
    fn default() -> Self {
        Self {
            min_group_n: default_min_group_n(),
        }
    }
}

/// Avg-k section.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvgkSection {
    /// Target average set size; calibrate requires it, tune produces it.
    pub k: Option<f64>,
}

/// The effective run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Upper bound on internal parallelism; 0 means one thread per core.
    #[serde(default)]
    pub jobs: usize,
    pub data: Option<DataPaths>,
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub mondrian: MondrianSection,
    #[serde(default)]
    pub avgk: AvgkSection,
    #[serde(default)]
    pub tune: TuneSection,
    pub human: Option<HumanSection>,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_method() -> Method {
    Method::Marginal
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: default_alpha(),
            method: default_method(),
            output_dir: default_output_dir(),
            jobs: 0,
            data: None,
            synthetic: None,
            split: SplitConfig::default(),
            score: ScoreSection::default(),
            predict: PredictSection::default(),
            mondrian: MondrianSection::default(),
            avgk: AvgkSection::default(),
            tune: TuneSection::default(),
            human: None,
        }
    }
}

/// CLI flag overrides; flags win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub method: Option<Method>,
    pub score_kind: Option<ScoreKind>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(alpha) = overrides.alpha {
            config.alpha = alpha;
        }
        if let Some(method) = overrides.method {
            config.method = method;
        }
        if let Some(kind) = overrides.score_kind {
            config.score.kind = kind;
        }
        if let Some(ref dir) = overrides.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(jobs) = overrides.jobs {
            config.jobs = jobs;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config(
                "config declares both [data] and [synthetic]; exactly one is allowed".into(),
            )),
            (None, None) => Err(Error::Config(
                "config declares neither [data] nor [synthetic]".into(),
            )),
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON encoding of the effective config.
    pub fn hash(&self) -> String {
        let canonical =
            serde_json::to_string(self).expect("config serialization cannot fail");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
alpha = 0.1

[synthetic]
m = 10
n_groups = 2
group_weights = [0.5, 0.5]
group_accuracy = [0.85, 0.55]
n = 1000
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.method, Method::Marginal);
        assert_eq!(config.score.kind, ScoreKind::Lac);
        assert_eq!(config.mondrian.min_group_n, 30);
        assert_eq!(config.tune.budget, 50);
        config.validate().unwrap();
    }

    #[test]
    fn overrides_win() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write;
        file.write_all(MINIMAL.as_bytes()).unwrap();
        let overrides = Overrides {
            seed: Some(99),
            alpha: Some(0.2),
            method: Some(Method::Mondrian),
            score_kind: Some(ScoreKind::Raps),
            output_dir: None,
            jobs: Some(2),
        };
        let config = RunConfig::load(Some(file.path()), &overrides).unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.alpha, 0.2);
        assert_eq!(config.method, Method::Mondrian);
        assert_eq!(config.score.kind, ScoreKind::Raps);
        assert_eq!(config.jobs, 2);
    }

    #[test]
    fn both_or_neither_task_is_rejected() {
        let neither = RunConfig::default();
        assert!(neither.validate().is_err());

        let both = format!(
            "{MINIMAL}\n[data]\ncal = \"cal.csv\"\n"
        );
        let config = RunConfig::from_toml(&both).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn alpha_domain_is_checked() {
        let text = MINIMAL.replace("alpha = 0.1", "alpha = 1.5");
        let config = RunConfig::from_toml(&text).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        let b = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_toml(&MINIMAL.replace("seed = 7", "seed = 8")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\ntypo_key = 1\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }
}
