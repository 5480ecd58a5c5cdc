//! Stage orchestration behind the command-line subcommands.
//!
//! Every stage reads its inputs from the configured paths, writes its
//! artifacts under the output directory and records their SHA-256 digests in
//! `manifest.json` next to a snapshot of the resolved configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::confidence::{
    apply_entropy_filter, calibrate_threshold, generating_entropies, ConfidenceError, DecidedBy, EntropyThreshold,
    Prediction,
};
use crate::config::{BackendKind, ConfigError, FilterStage, PipelineConfig};
use crate::corpus::{self, CorpusError, DatasetStats, GoldLabel, QuestionInstance, SimilarityMode, Split};
use crate::execution::{apply_execution_filter, ExecutionError, ReadOnlyDb, Validity};
use crate::generation::{generate_all, to_prediction, Backend, GenerationError, HttpBackend, ReplayBackend};
use crate::prompting::{build_prompt, PromptError, PromptTemplate};
use crate::reliability::{judge, render_report, score, InstanceOutcome, ReliabilityError, ReliabilityReport, ReportFormat};
use crate::schema::{self, SchemaError};
use crate::selftrain::{augment, render_finetune, select_pseudo_nulls, SelfTrainError};

pub const GENERATIONS_FILE: &str = "generations.json";
pub const GENERATED_PREDICTIONS_FILE: &str = "predictions.generated.json";
pub const FILTERED_PREDICTIONS_FILE: &str = "predictions.filtered.json";
pub const AUDIT_FILE: &str = "filter_audit.json";
pub const SUBMISSION_FILE: &str = "submission.json";
pub const AUGMENTED_FILE: &str = "augmented_train.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Execution(#[from] ExecutionError),
    #[error(transparent)]
    SelfTrain(#[from] SelfTrainError),
    #[error(transparent)]
    Reliability(#[from] ReliabilityError),
    #[error("labels are missing for {} prediction(s): {}", .0.len(), .0.join(", "))]
    Coverage(Vec<String>),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

impl PipelineError {
    /// Process exit status: 1 usage/config, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Prompt(e) if !matches!(e, PromptError::Unlabeled(_) | PromptError::EmptyQuestion(_)) => 1,
            PipelineError::Generation(GenerationError::InvalidParams(_)) => 1,
            PipelineError::Generation(GenerationError::MissingFixture(_) | GenerationError::InvalidToken { .. }) => 2,
            PipelineError::Generation(_) => 3,
            _ => 2,
        }
    }
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_artifact(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| file_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| file_err(path, e))
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Merges `artifacts` into the run manifest, refreshing the config snapshot.
fn update_manifest(cfg: &PipelineConfig, artifacts: &[&str]) -> Result<(), PipelineError> {
    let path = cfg.paths.output_dir.join(MANIFEST_FILE);
    let mut hashes: BTreeMap<String, String> = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| serde_json::from_value(v["artifacts"].clone()).ok())
        .unwrap_or_default();
    for name in artifacts {
        hashes.insert(name.to_string(), sha256_file(&cfg.paths.output_dir.join(name))?);
    }
    let manifest = json!({ "config": cfg.to_json(), "artifacts": hashes });
    write_artifact(&path, &to_pretty_json(&manifest))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

fn load_labeled(questions: &Path, labels: Option<&Path>, split: Split) -> Result<Vec<QuestionInstance>, PipelineError> {
    let qs = corpus::load_questions(questions, split)?;
    Ok(match labels {
        Some(l) => corpus::attach_labels(&qs, &corpus::load_labels(l)?)?,
        None => qs,
    })
}

fn load_template(cfg: &PipelineConfig) -> Result<PromptTemplate, PipelineError> {
    Ok(match &cfg.paths.template {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::default(),
    })
}

fn load_few_shot(cfg: &PipelineConfig) -> Result<Vec<(String, String)>, PipelineError> {
    match &cfg.paths.few_shot {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| file_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| file_err(p, e))
        }
        None => Ok(Vec::new()),
    }
}

/// Serialized schema of the configured database, or empty when schema
/// text is not part of the prompt.
fn schema_text(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    if !cfg.prompt.include_schema {
        return Ok(String::new());
    }
    let db_path = PipelineConfig::require("paths.database", &cfg.paths.database)?;
    let db = ReadOnlyDb::open(db_path)?;
    let schema = schema::introspect(&db)?;
    schema.validate()?;
    Ok(schema::serialize(&schema))
}

fn backend(cfg: &PipelineConfig) -> Result<Box<dyn Backend>, PipelineError> {
    Ok(match cfg.backend.kind {
        BackendKind::Replay => {
            let fixtures = PipelineConfig::require("paths.fixtures", &cfg.paths.fixtures)?;
            Box::new(ReplayBackend::load(fixtures)?)
        }
        BackendKind::Http => {
            let key = std::env::var(&cfg.backend.api_key_env)
                .map_err(|_| GenerationError::MissingCredential(cfg.backend.api_key_env.clone()))?;
            Box::new(HttpBackend::new(
                cfg.backend.endpoint.clone(),
                Some(key),
                cfg.backend.retry(),
                std::time::Duration::from_millis(cfg.backend.request_timeout_ms),
            ))
        }
    })
}

pub fn cmd_generate(cfg: &PipelineConfig) -> Result<Vec<Prediction>, PipelineError> {
    cfg.validate_paths()?;
    let questions_path = PipelineConfig::require("paths.questions", &cfg.paths.questions)?;
    if cfg.prompt.include_schema {
        PipelineConfig::require("paths.database", &cfg.paths.database)?;
    }
    let params = cfg.backend.params();
    let backend = backend(cfg)?;
    let questions = corpus::load_questions(questions_path, cfg.paths.split)?;
    let template = load_template(cfg)?;
    let few_shot = load_few_shot(cfg)?;
    let schema = schema_text(cfg)?;
    let prompts = questions
        .iter()
        .map(|q| Ok((q.id.clone(), build_prompt(&template, q, &schema, cfg.prompt.features(), &few_shot)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;

    log::info!("generating {} predictions", prompts.len());
    let outputs = generate_all(backend.as_ref(), &prompts, &params, cfg.parallelism)?;
    let predictions = outputs
        .iter()
        .map(to_prediction)
        .collect::<Result<Vec<_>, _>>()?;

    let out = &cfg.paths.output_dir;
    write_artifact(&out.join(GENERATIONS_FILE), &crate::generation::render_generation_log(&outputs))?;
    write_artifact(&out.join(GENERATED_PREDICTIONS_FILE), &to_pretty_json(&predictions))?;
    update_manifest(cfg, &[GENERATIONS_FILE, GENERATED_PREDICTIONS_FILE])?;
    Ok(predictions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstentionRecord {
    pub question_id: String,
    pub cause: DecidedBy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validity: Option<Validity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub question_id: String,
    pub validity: Validity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterAudit {
    pub order: String,
    /// Calibrated threshold, absent when the entropy stage did not run or had nothing to filter.
    pub entropy_threshold: Option<EntropyThreshold>,
    pub executions: Vec<ExecutionRecord>,
    pub abstentions: Vec<AbstentionRecord>,
}

/// Applies the configured filter stages in order and records why each prediction was dropped.
pub fn run_filters(cfg: &PipelineConfig, predictions: &[Prediction]) -> Result<(Vec<Prediction>, FilterAudit), PipelineError> {
    let mut current = predictions.to_vec();
    let mut audit = FilterAudit {
        order: cfg.filter.order.to_string(),
        entropy_threshold: None,
        executions: Vec::new(),
        abstentions: Vec::new(),
    };
    for stage in cfg.filter.order.stages() {
        match stage {
            FilterStage::Entropy => {
                let population = generating_entropies(&current)?;
                if population.is_empty() {
                    continue;
                }
                let threshold = calibrate_threshold(&population, cfg.filter.rho)?;
                let next = apply_entropy_filter(&current, &threshold)?;
                for (before, after) in current.iter().zip(&next) {
                    if before.decision.is_generate() && !after.decision.is_generate() {
                        audit.abstentions.push(AbstentionRecord {
                            question_id: after.question_id.clone(),
                            cause: DecidedBy::EntropyFilter,
                            max_entropy: after.max_entropy,
                            validity: None,
                            detail: None,
                        });
                    }
                }
                audit.entropy_threshold = Some(threshold);
                current = next;
            }
            FilterStage::Execution => {
                let db = PipelineConfig::require("paths.database", &cfg.paths.database)?;
                let results = apply_execution_filter(&current, db, cfg.filter.timeout_ms, cfg.parallelism)?;
                let mut next = Vec::with_capacity(results.len());
                for (p, outcome) in results {
                    if let Some(o) = outcome {
                        audit.executions.push(ExecutionRecord {
                            question_id: p.question_id.clone(),
                            validity: o.validity,
                        });
                        if !o.validity.is_valid() {
                            let detail = match &o.status {
                                crate::execution::ExecutionStatus::Error { message } => Some(message.clone()),
                                crate::execution::ExecutionStatus::Timeout => Some("timeout".into()),
                                _ => None,
                            };
                            audit.abstentions.push(AbstentionRecord {
                                question_id: p.question_id.clone(),
                                cause: DecidedBy::ExecutionFilter,
                                max_entropy: p.max_entropy,
                                validity: Some(o.validity),
                                detail,
                            });
                        }
                    }
                    next.push(p);
                }
                current = next;
            }
        }
    }
    Ok((current, audit))
}

pub fn cmd_filter(cfg: &PipelineConfig, predictions_path: &Path) -> Result<(Vec<Prediction>, FilterAudit), PipelineError> {
    cfg.validate_paths()?;
    let predictions = read_predictions(predictions_path)?;
    let (filtered, audit) = run_filters(cfg, &predictions)?;
    let out = &cfg.paths.output_dir;
    write_artifact(&out.join(FILTERED_PREDICTIONS_FILE), &to_pretty_json(&filtered))?;
    write_artifact(&out.join(AUDIT_FILE), &to_pretty_json(&audit))?;
    write_artifact(&out.join(SUBMISSION_FILE), &corpus::render_predictions(&filtered)?)?;
    update_manifest(cfg, &[FILTERED_PREDICTIONS_FILE, AUDIT_FILE, SUBMISSION_FILE])?;
    Ok((filtered, audit))
}

/// Builds the null-augmented training set as JSONL text.
pub fn build_augmented(cfg: &PipelineConfig, predictions: &[Prediction]) -> Result<(String, usize), PipelineError> {
    let train_q = PipelineConfig::require("paths.train_questions", &cfg.paths.train_questions)?;
    let train_l = PipelineConfig::require("paths.train_labels", &cfg.paths.train_labels)?;
    let source_q = PipelineConfig::require("paths.questions", &cfg.paths.questions)?;
    let train = load_labeled(train_q, Some(train_l), Split::Train)?;
    let source = corpus::load_questions(source_q, cfg.paths.split)?;
    let pseudo = select_pseudo_nulls(predictions, &source, cfg.augment.k)?;
    let dataset = augment(&train, &pseudo, cfg.augment.k)?;
    let template = load_template(cfg)?;
    let text = render_finetune(&dataset, &template, cfg.prompt.features(), &schema_text(cfg)?)?;
    Ok((text, dataset.pseudo_count()))
}

pub fn cmd_augment(cfg: &PipelineConfig, predictions_path: &Path) -> Result<usize, PipelineError> {
    cfg.validate_paths()?;
    let predictions = read_predictions(predictions_path)?;
    let (text, pseudo) = build_augmented(cfg, &predictions)?;
    write_artifact(&cfg.paths.output_dir.join(AUGMENTED_FILE), &text)?;
    update_manifest(cfg, &[AUGMENTED_FILE])?;
    Ok(pseudo)
}

/// Judges every prediction against its gold label. Labels must cover every prediction.
pub fn judge_all(
    cfg: &PipelineConfig,
    predictions: &[Prediction],
    labels: &BTreeMap<String, GoldLabel>,
) -> Result<Vec<InstanceOutcome>, PipelineError> {
    let missing: Vec<String> = predictions
        .iter()
        .filter(|p| !labels.get(&p.question_id).is_some_and(GoldLabel::is_labeled))
        .map(|p| p.question_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::Coverage(missing));
    }
    let needs_db = predictions
        .iter()
        .any(|p| p.decision.is_generate() && matches!(labels[&p.question_id], GoldLabel::Answerable(_)));
    let db_path = if needs_db {
        Some(PipelineConfig::require("paths.database", &cfg.paths.database)?.to_path_buf())
    } else {
        None
    };
    if let Some(p) = &db_path {
        ReadOnlyDb::open(p)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| ExecutionError::Pool(e.to_string()))?;
    pool.install(|| {
        predictions
            .par_iter()
            .map_init(
                || db_path.as_deref().map(ReadOnlyDb::open),
                |db, p| {
                    let gold = &labels[&p.question_id];
                    match db {
                        Some(Ok(db)) => Ok(judge(p, gold, db, cfg.filter.timeout_ms, cfg.score.tolerance)?),
                        Some(Err(e)) => Err(ExecutionError::Pool(e.to_string()).into()),
                        None => {
                            // Without a database only abstentions and unanswerables can be judged.
                            let kind = match gold {
                                GoldLabel::Answerable(_) => crate::reliability::GoldKind::Answerable,
                                _ => crate::reliability::GoldKind::Unanswerable,
                            };
                            Ok(InstanceOutcome::new(p.question_id.clone(), kind, p.decision.is_generate(), false))
                        }
                    }
                },
            )
            .collect()
    })
}

pub fn cmd_score(
    cfg: &PipelineConfig,
    predictions_path: &Path,
    labels_path: &Path,
    label: &str,
) -> Result<(ReliabilityReport, String), PipelineError> {
    cfg.validate_paths()?;
    let predictions = read_predictions(predictions_path)?;
    let labels = corpus::load_labels(labels_path)?;
    let outcomes = judge_all(cfg, &predictions, &labels)?;
    let report = score(&outcomes, &cfg.score.penalties)?;
    let labelled = [(label.to_string(), report.clone())];
    let out = &cfg.paths.output_dir;
    write_artifact(&out.join(REPORT_JSON_FILE), &render_report(&labelled, ReportFormat::Json))?;
    write_artifact(&out.join(REPORT_TEXT_FILE), &render_report(&labelled, ReportFormat::Table))?;
    update_manifest(cfg, &[REPORT_JSON_FILE, REPORT_TEXT_FILE])?;
    Ok((report.clone(), render_report(&labelled, cfg.score.format)))
}

pub fn cmd_schema(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    cfg.validate_paths()?;
    let db_path = PipelineConfig::require("paths.database", &cfg.paths.database)?;
    let db = ReadOnlyDb::open(db_path)?;
    let schema = schema::introspect(&db)?;
    schema.validate()?;
    Ok(schema::serialize(&schema))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<DatasetStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<DatasetStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_similarity: Option<f64>,
}

pub fn cmd_stats(
    cfg: &PipelineConfig,
    embeddings: Option<(&Path, &Path)>,
    mode: SimilarityMode,
) -> Result<StatsReport, PipelineError> {
    cfg.validate_paths()?;
    let train = match &cfg.paths.train_questions {
        Some(q) => Some(corpus::dataset_stats(&load_labeled(q, cfg.paths.train_labels.as_deref(), Split::Train)?)),
        None => None,
    };
    let eval = match &cfg.paths.questions {
        Some(q) => Some(corpus::dataset_stats(&load_labeled(q, cfg.paths.labels.as_deref(), cfg.paths.split)?)),
        None => None,
    };
    let embedding_similarity = match embeddings {
        Some((a, b)) => Some(corpus::mean_cross_similarity(
            &corpus::load_embeddings(a)?,
            &corpus::load_embeddings(b)?,
            mode,
        )?),
        None => None,
    };
    Ok(StatsReport {
        train,
        eval,
        embedding_similarity,
    })
}

/// Output of a full generate, filter, augment and score run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub predictions: Vec<Prediction>,
    pub audit: FilterAudit,
    pub pseudo_nulls: Option<usize>,
    pub report: Option<(ReliabilityReport, String)>,
}

/// Runs every stage in sequence. Augmentation runs when training data is
/// configured and scoring when labels are.
pub fn run_all(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    cmd_generate(cfg)?;
    let out = &cfg.paths.output_dir;
    let (predictions, audit) = cmd_filter(cfg, &out.join(GENERATED_PREDICTIONS_FILE))?;
    let filtered = out.join(FILTERED_PREDICTIONS_FILE);
    let pseudo_nulls = if cfg.paths.train_questions.is_some() && cfg.paths.train_labels.is_some() {
        Some(cmd_augment(cfg, &filtered)?)
    } else {
        None
    };
    let report = match &cfg.paths.labels {
        Some(labels) => Some(cmd_score(cfg, &filtered, labels, &cfg.paths.split.to_string())?),
        None => None,
    };
    Ok(RunSummary {
        predictions,
        audit,
        pseudo_nulls,
        report,
    })
}
