//! Pipeline configuration: a TOML file with per-stage sections, plus
//! `section.key=value` overrides from the command line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::DEFAULT_RHO;
use crate::corpus::Split;
use crate::execution::{DEFAULT_TIMEOUT_MS, DEFAULT_TOLERANCE};
use crate::generation::{GenerationParams, RetryPolicy, DEFAULT_K_TOP, DEFAULT_PARALLELISM};
use crate::prompting::PromptFeatures;
use crate::reliability::{Penalty, ReportFormat};
use crate::selftrain::PseudoCount;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("bad override `{0}` (expected section.key=value)")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{field} points to {path}, which does not exist")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("{0} is required for this command but not configured")]
    Required(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOrder {
    #[default]
    EntropyThenExecution,
    ExecutionThenEntropy,
    EntropyOnly,
    ExecutionOnly,
    None,
}

impl FilterOrder {
    pub fn stages(self) -> &'static [FilterStage] {
        use FilterStage::*;
        match self {
            FilterOrder::EntropyThenExecution => &[Entropy, Execution],
            FilterOrder::ExecutionThenEntropy => &[Execution, Entropy],
            FilterOrder::EntropyOnly => &[Entropy],
            FilterOrder::ExecutionOnly => &[Execution],
            FilterOrder::None => &[],
        }
    }
}

impl fmt::Display for FilterOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

impl FromStr for FilterOrder {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| ConfigError::Invalid(format!("unknown filter order `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterStage {
    Entropy,
    Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Questions to predict (dev or test split); also the pseudo-labeling source.
    pub questions: Option<PathBuf>,
    pub split: Split,
    /// Gold labels for `questions`, used by `score`.
    pub labels: Option<PathBuf>,
    pub train_questions: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub database: Option<PathBuf>,
    /// Replay fixture for the offline backend.
    pub fixtures: Option<PathBuf>,
    pub template: Option<PathBuf>,
    /// JSON array of `[user, assistant]` pairs used as demonstrations.
    pub few_shot: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            questions: None,
            split: Split::Test,
            labels: None,
            train_questions: None,
            train_labels: None,
            database: None,
            fixtures: None,
            template: None,
            few_shot: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API credential.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub k_top: usize,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub request_timeout_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let params = GenerationParams::default();
        let retry = RetryPolicy::default();
        Self {
            kind: BackendKind::Replay,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: params.model_name,
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            k_top: DEFAULT_K_TOP,
            max_retries: retry.max_retries,
            initial_backoff_ms: retry.initial_backoff_ms,
            max_backoff_ms: retry.max_backoff_ms,
            request_timeout_ms: 60_000,
        }
    }
}

impl BackendConfig {
    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            model_name: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            k_top: self.k_top,
        }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            initial_backoff_ms: self.initial_backoff_ms,
            max_backoff_ms: self.max_backoff_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub include_schema: bool,
    pub include_unans_instruction: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        let f = PromptFeatures::default();
        Self {
            include_schema: f.include_schema,
            include_unans_instruction: f.include_unans_instruction,
        }
    }
}

impl PromptConfig {
    pub fn features(&self) -> PromptFeatures {
        PromptFeatures {
            include_schema: self.include_schema,
            include_unans_instruction: self.include_unans_instruction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub rho: f64,
    pub order: FilterOrder,
    pub timeout_ms: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            order: FilterOrder::default(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub k: PseudoCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub penalties: Vec<Penalty>,
    pub tolerance: f64,
    pub format: ReportFormat,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            penalties: Penalty::DEFAULTS.to_vec(),
            tolerance: DEFAULT_TOLERANCE,
            format: ReportFormat::Table,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub parallelism: usize,
    pub paths: PathsConfig,
    pub backend: BackendConfig,
    pub prompt: PromptConfig,
    pub filter: FilterConfig,
    pub augment: AugmentConfig,
    pub score: ScoreConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            parallelism: DEFAULT_PARALLELISM,
            paths: PathsConfig::default(),
            backend: BackendConfig::default(),
            prompt: PromptConfig::default(),
            filter: FilterConfig::default(),
            augment: AugmentConfig::default(),
            score: ScoreConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cursor = table;
    for section in sections {
        cursor = cursor
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    }
    cursor.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applies overrides and resolves relative paths against `base_dir`.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.check_values()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        match path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                let base = path.parent().unwrap_or(Path::new("."));
                Self::from_toml(&text, overrides, base)
            }
            None => Self::from_toml("", overrides, Path::new(".")),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.questions,
            &mut paths.labels,
            &mut paths.train_questions,
            &mut paths.train_labels,
            &mut paths.database,
            &mut paths.fixtures,
            &mut paths.template,
            &mut paths.few_shot,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut paths.output_dir);
    }

    fn check_values(&self) -> Result<(), ConfigError> {
        if !(self.filter.rho > 0.0 && self.filter.rho < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "filter.rho must be in (0, 1), got {}",
                self.filter.rho
            )));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        if self.filter.timeout_ms == 0 {
            return Err(ConfigError::Invalid("filter.timeout_ms must be positive".into()));
        }
        if self.score.tolerance.is_nan() || self.score.tolerance < 0.0 {
            return Err(ConfigError::Invalid("score.tolerance must be >= 0".into()));
        }
        self.backend
            .params()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Every configured input path must exist.
    pub fn validate_paths(&self) -> Result<(), ConfigError> {
        let p = &self.paths;
        for (field, path) in [
            ("paths.questions", &p.questions),
            ("paths.labels", &p.labels),
            ("paths.train_questions", &p.train_questions),
            ("paths.train_labels", &p.train_labels),
            ("paths.database", &p.database),
            ("paths.fixtures", &p.fixtures),
            ("paths.template", &p.template),
            ("paths.few_shot", &p.few_shot),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(ConfigError::MissingPath {
                        field,
                        path: path.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn require<'a>(field: &'static str, value: &'a Option<PathBuf>) -> Result<&'a Path, ConfigError> {
        value.as_deref().ok_or(ConfigError::Required(field))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
