//! Pseudo-null selection and null-augmented fine-tuning exports.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::confidence::{Decision, Prediction};
use crate::corpus::{GoldLabel, QuestionInstance, Split};
use crate::prompting::{build_finetune_record, build_prompt, PromptError, PromptFeatures, PromptTemplate};

#[derive(Debug, Error)]
pub enum SelfTrainError {
    #[error("k must be positive")]
    NonPositiveK,
    #[error("invalid k `{0}` (expected a positive integer or \"all\")")]
    BadK(String),
    #[error("prediction `{0}` has no matching question")]
    UnknownPrediction(String),
    #[error("pseudo-labeled id `{0}` collides with a training id")]
    IdCollision(String),
    #[error("record `{0}` is unlabeled")]
    Unlabeled(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How many pseudo-null samples to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PseudoCount {
    #[default]
    All,
    Top(usize),
}

impl PseudoCount {
    pub fn top(k: i64) -> Result<Self, SelfTrainError> {
        if k <= 0 {
            return Err(SelfTrainError::NonPositiveK);
        }
        Ok(PseudoCount::Top(k as usize))
    }
}

impl fmt::Display for PseudoCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PseudoCount::All => f.write_str("all"),
            PseudoCount::Top(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for PseudoCount {
    type Err = SelfTrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(PseudoCount::All);
        }
        let k: i64 = s.parse().map_err(|_| SelfTrainError::BadK(s.to_string()))?;
        PseudoCount::top(k)
    }
}

impl Serialize for PseudoCount {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            PseudoCount::All => serializer.serialize_str("all"),
            PseudoCount::Top(k) => serializer.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for PseudoCount {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(k) => PseudoCount::top(k),
            Raw::Str(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    PseudoNull,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub question: QuestionInstance,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedDataset {
    pub records: Vec<AugmentedRecord>,
    pub source_split_of_pseudo: Option<Split>,
    pub k_requested: PseudoCount,
}

impl AugmentedDataset {
    pub fn pseudo_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.provenance == Provenance::PseudoNull)
            .count()
    }
}

/// Abstained questions relabeled as unanswerable. With `Top(k)` the k most
/// uncertain are kept (no entropy ranks last, ties by id). Output is sorted by id.
pub fn select_pseudo_nulls(
    predictions: &[Prediction],
    questions: &[QuestionInstance],
    k: PseudoCount,
) -> Result<Vec<QuestionInstance>, SelfTrainError> {
    if k == PseudoCount::Top(0) {
        return Err(SelfTrainError::NonPositiveK);
    }
    let by_id: HashMap<&str, &QuestionInstance> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut abstained: Vec<(&Prediction, &QuestionInstance)> = Vec::new();
    for p in predictions {
        let q = by_id
            .get(p.question_id.as_str())
            .ok_or_else(|| SelfTrainError::UnknownPrediction(p.question_id.clone()))?;
        if p.decision == Decision::Abstain {
            abstained.push((p, q));
        }
    }
    abstained.sort_by(|(a, _), (b, _)| match (a.max_entropy, b.max_entropy) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.question_id.cmp(&b.question_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.question_id.cmp(&b.question_id),
    });
    if let PseudoCount::Top(k) = k {
        abstained.truncate(k);
    }
    let mut out: Vec<QuestionInstance> = abstained
        .into_iter()
        .map(|(_, q)| QuestionInstance {
            gold: GoldLabel::Unanswerable,
            ..q.clone()
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn augment(
    train: &[QuestionInstance],
    pseudo: &[QuestionInstance],
    k_requested: PseudoCount,
) -> Result<AugmentedDataset, SelfTrainError> {
    let train_ids: HashSet<&str> = train.iter().map(|q| q.id.as_str()).collect();
    if let Some(q) = pseudo.iter().find(|q| train_ids.contains(q.id.as_str())) {
        return Err(SelfTrainError::IdCollision(q.id.clone()));
    }
    let mut pseudo_sorted: Vec<&QuestionInstance> = pseudo.iter().collect();
    pseudo_sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let records = train
        .iter()
        .map(|q| AugmentedRecord {
            question: q.clone(),
            provenance: Provenance::Original,
        })
        .chain(pseudo_sorted.into_iter().map(|q| AugmentedRecord {
            question: QuestionInstance {
                gold: GoldLabel::Unanswerable,
                ..q.clone()
            },
            provenance: Provenance::PseudoNull,
        }))
        .collect();
    Ok(AugmentedDataset {
        records,
        source_split_of_pseudo: pseudo.first().map(|q| q.split),
        k_requested,
    })
}

/// One `{"messages": [...]}` object per line, in dataset order.
pub fn render_finetune(
    dataset: &AugmentedDataset,
    template: &PromptTemplate,
    features: PromptFeatures,
    schema_text: &str,
) -> Result<String, SelfTrainError> {
    let mut out = String::new();
    for record in &dataset.records {
        let q = &record.question;
        if !q.gold.is_labeled() {
            return Err(SelfTrainError::Unlabeled(q.id.clone()));
        }
        let bundle = build_prompt(template, q, schema_text, features, &[])?;
        let line = build_finetune_record(q, &bundle)?;
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn export_finetune(
    dataset: &AugmentedDataset,
    template: &PromptTemplate,
    features: PromptFeatures,
    schema_text: &str,
    path: &Path,
) -> Result<(), SelfTrainError> {
    let text = render_finetune(dataset, template, features, schema_text)?;
    fs::write(path, text).map_err(|source| SelfTrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}
