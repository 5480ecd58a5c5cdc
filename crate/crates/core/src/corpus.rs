//! Question corpora, gold labels, submission files and embedding diagnostics.
//!
//! Question files follow the EHRSQL distribution layout: either a top-level
//! array or an object wrapping the entries in a `"data"` array. Label and
//! prediction files are flat JSON objects mapping a question id to SQL text,
//! with the literal `"null"` standing for an abstention.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::confidence::{Decision, Prediction};

/// Literal used in label and submission files for "no SQL".
pub const NULL_LABEL: &str = "null";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: expected a JSON array or an object with a \"data\" array")]
    BadQuestionRoot { path: PathBuf },
    #[error("{path}: entry {index} is missing field `{field}`")]
    MissingField {
        path: PathBuf,
        index: usize,
        field: &'static str,
    },
    #[error("{path}: entry {index} has an empty question text")]
    EmptyQuestion { path: PathBuf, index: usize },
    #[error("duplicate question id `{0}`")]
    DuplicateId(String),
    #[error("label for `{0}` is an empty string")]
    EmptyLabel(String),
    #[error("label file root must be a JSON object mapping id to string")]
    BadLabelRoot,
    #[error("label id `{0}` does not match any loaded question")]
    UnknownLabelId(String),
    #[error("embedding set is empty")]
    EmptyEmbeddings,
    #[error("embedding dimension mismatch: expected {expected}, got {found} for `{id}`")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding `{0}` has zero norm")]
    ZeroNorm(String),
    #[error("embedding `{0}` has no components")]
    ZeroDimension(String),
    #[error("unknown split `{0}` (expected train, dev or test)")]
    UnknownSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "valid" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(CorpusError::UnknownSplit(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "sql", rename_all = "snake_case")]
pub enum GoldLabel {
    Answerable(String),
    Unanswerable,
    Unlabeled,
}

impl GoldLabel {
    /// Interprets one label-file value. `"null"` (any case, surrounding
    /// whitespace ignored) means unanswerable.
    pub fn from_label_text(id: &str, text: &str) -> Result<Self, CorpusError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(CorpusError::EmptyLabel(id.to_string()));
        }
        if trimmed.eq_ignore_ascii_case(NULL_LABEL) {
            Ok(GoldLabel::Unanswerable)
        } else {
            Ok(GoldLabel::Answerable(text.to_string()))
        }
    }

    pub fn is_labeled(&self) -> bool {
        !matches!(self, GoldLabel::Unlabeled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub id: String,
    pub text: String,
    pub split: Split,
    pub gold: GoldLabel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_total: usize,
    pub n_answerable: usize,
    pub n_unanswerable: usize,
    pub n_unlabeled: usize,
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn id_from_value(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Parses question entries from an in-memory JSON document.
pub fn parse_questions(
    json: &str,
    split: Split,
    origin: &Path,
) -> Result<Vec<QuestionInstance>, CorpusError> {
    let root: Value = serde_json::from_str(json).map_err(|source| CorpusError::Json {
        path: origin.to_path_buf(),
        source,
    })?;
    let entries = match &root {
        Value::Array(items) => items,
        Value::Object(map) => match map.get("data") {
            Some(Value::Array(items)) => items,
            _ => {
                return Err(CorpusError::BadQuestionRoot {
                    path: origin.to_path_buf(),
                })
            }
        },
        _ => {
            return Err(CorpusError::BadQuestionRoot {
                path: origin.to_path_buf(),
            })
        }
    };

    let mut seen = HashSet::with_capacity(entries.len());
    let mut out = Vec::with_capacity(entries.len());
    for (index, entry) in entries.iter().enumerate() {
        let missing = |field| CorpusError::MissingField {
            path: origin.to_path_buf(),
            index,
            field,
        };
        let id = entry.get("id").and_then(id_from_value).ok_or_else(|| missing("id"))?;
        let text = entry
            .get("question")
            .and_then(Value::as_str)
            .ok_or_else(|| missing("question"))?;
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyQuestion {
                path: origin.to_path_buf(),
                index,
            });
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        out.push(QuestionInstance {
            id,
            text: text.to_string(),
            split,
            gold: GoldLabel::Unlabeled,
        });
    }
    Ok(out)
}

pub fn load_questions(path: &Path, split: Split) -> Result<Vec<QuestionInstance>, CorpusError> {
    parse_questions(&read_file(path)?, split, path)
}

/// Object entries in document order, repeated keys included.
struct OrderedStringMap(Vec<(String, String)>);

impl<'de> Deserialize<'de> for OrderedStringMap {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedStringMap;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping id to string")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some(entry) = map.next_entry::<String, String>()? {
                    entries.push(entry);
                }
                Ok(OrderedStringMap(entries))
            }
        }
        deserializer.deserialize_map(V)
    }
}

pub fn parse_labels(json: &str, origin: &Path) -> Result<BTreeMap<String, GoldLabel>, CorpusError> {
    let json_err = |source| CorpusError::Json {
        path: origin.to_path_buf(),
        source,
    };
    let root: Value = serde_json::from_str(json).map_err(json_err)?;
    if !root.is_object() {
        return Err(CorpusError::BadLabelRoot);
    }
    // A plain Value silently keeps the last of two equal keys.
    let entries: OrderedStringMap = serde_json::from_str(json).map_err(json_err)?;
    let mut labels = BTreeMap::new();
    for (id, text) in entries.0 {
        let label = GoldLabel::from_label_text(&id, &text)?;
        if labels.insert(id.clone(), label).is_some() {
            return Err(CorpusError::DuplicateId(id));
        }
    }
    Ok(labels)
}

pub fn load_labels(path: &Path) -> Result<BTreeMap<String, GoldLabel>, CorpusError> {
    parse_labels(&read_file(path)?, path)
}

pub fn attach_labels(
    instances: &[QuestionInstance],
    labels: &BTreeMap<String, GoldLabel>,
) -> Result<Vec<QuestionInstance>, CorpusError> {
    let known: HashSet<&str> = instances.iter().map(|q| q.id.as_str()).collect();
    if let Some(unknown) = labels.keys().find(|id| !known.contains(id.as_str())) {
        return Err(CorpusError::UnknownLabelId(unknown.clone()));
    }
    Ok(instances
        .iter()
        .map(|q| {
            let mut q = q.clone();
            if let Some(label) = labels.get(&q.id) {
                q.gold = label.clone();
            }
            q
        })
        .collect())
}

pub fn dataset_stats(instances: &[QuestionInstance]) -> DatasetStats {
    instances
        .iter()
        .fold(DatasetStats::default(), |mut acc, q| {
            acc.n_total += 1;
            match q.gold {
                GoldLabel::Answerable(_) => acc.n_answerable += 1,
                GoldLabel::Unanswerable => acc.n_unanswerable += 1,
                GoldLabel::Unlabeled => acc.n_unlabeled += 1,
            }
            acc
        })
}

/// Renders predictions as a submission object: id to SQL, abstentions as `"null"`.
/// Keys are sorted so identical inputs produce identical bytes.
pub fn render_predictions(predictions: &[Prediction]) -> Result<String, CorpusError> {
    let mut map = BTreeMap::new();
    for p in predictions {
        let value = match &p.decision {
            Decision::Generate(sql) => sql.as_str(),
            Decision::Abstain => NULL_LABEL,
        };
        if map.insert(p.question_id.as_str(), value).is_some() {
            return Err(CorpusError::DuplicateId(p.question_id.clone()));
        }
    }
    let mut text = serde_json::to_string_pretty(&map).expect("string map serializes");
    text.push('\n');
    Ok(text)
}

pub fn export_predictions(predictions: &[Prediction], path: &Path) -> Result<(), CorpusError> {
    let text = render_predictions(predictions)?;
    fs::write(path, text).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub question_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Loads a JSON object of id to number array. Vectors come back sorted by id.
pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingVector>, CorpusError> {
    let text = read_file(path)?;
    let map: BTreeMap<String, Vec<f64>> =
        serde_json::from_str(&text).map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    let vectors: Vec<EmbeddingVector> = map
        .into_iter()
        .map(|(question_id, values)| EmbeddingVector { question_id, values })
        .collect();
    check_embeddings(&vectors, None)?;
    Ok(vectors)
}

fn check_embeddings(set: &[EmbeddingVector], dim: Option<usize>) -> Result<usize, CorpusError> {
    let first = set.first().ok_or(CorpusError::EmptyEmbeddings)?;
    let expected = dim.unwrap_or(first.values.len());
    for v in set {
        if v.values.is_empty() {
            return Err(CorpusError::ZeroDimension(v.question_id.clone()));
        }
        if v.values.len() != expected {
            return Err(CorpusError::DimensionMismatch {
                id: v.question_id.clone(),
                expected,
                found: v.values.len(),
            });
        }
        if v.norm() == 0.0 {
            return Err(CorpusError::ZeroNorm(v.question_id.clone()));
        }
    }
    Ok(expected)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Mean over every (a, b) pair.
    #[default]
    AllPairs,
    /// For each vector in the first set, its best match in the second; then the mean.
    NearestNeighbor,
}

fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    (dot / (a.norm() * b.norm())).clamp(-1.0, 1.0)
}

pub fn mean_cross_similarity(
    set_a: &[EmbeddingVector],
    set_b: &[EmbeddingVector],
    mode: SimilarityMode,
) -> Result<f64, CorpusError> {
    let dim = check_embeddings(set_a, None)?;
    check_embeddings(set_b, Some(dim))?;
    let total: f64 = match mode {
        SimilarityMode::AllPairs => set_a
            .iter()
            .flat_map(|a| set_b.iter().map(move |b| cosine(a, b)))
            .sum::<f64>()
            / (set_a.len() * set_b.len()) as f64,
        SimilarityMode::NearestNeighbor => {
            set_a
                .iter()
                .map(|a| {
                    set_b
                        .iter()
                        .map(|b| cosine(a, b))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum::<f64>()
                / set_a.len() as f64
        }
    };
    Ok(total)
}

/// Index of instances by id, for lookups that must fail on unknown ids.
pub fn index_by_id(instances: &[QuestionInstance]) -> HashMap<&str, &QuestionInstance> {
    instances.iter().map(|q| (q.id.as_str(), q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::DecidedBy;

    fn origin() -> PathBuf {
        PathBuf::from("<mem>")
    }

    fn emb(id: &str, values: &[f64]) -> EmbeddingVector {
        EmbeddingVector {
            question_id: id.into(),
            values: values.to_vec(),
        }
    }

    #[test]
    fn parses_wrapped_and_bare_question_files() {
        let wrapped = r#"{"version":"x","data":[{"id":"q1","question":"count patients"},{"id":"q2","question":"weather today?"}]}"#;
        let qs = parse_questions(wrapped, Split::Dev, &origin()).unwrap();
        assert_eq!(qs.len(), 2);
        assert!(qs.iter().all(|q| q.gold == GoldLabel::Unlabeled));
        assert_eq!(qs[1].id, "q2");

        let bare = r#"[{"id":"q1","question":"count patients"}]"#;
        assert_eq!(parse_questions(bare, Split::Dev, &origin()).unwrap().len(), 1);
        assert!(parse_questions(r#"{"data":[]}"#, Split::Test, &origin())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn question_errors_carry_index() {
        let err = parse_questions(
            r#"[{"id":"a","question":"x"},{"question":"y"}]"#,
            Split::Dev,
            &origin(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { index: 1, field: "id", .. }));

        let err = parse_questions(r#"[{"id":"a"}]"#, Split::Dev, &origin()).unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { index: 0, field: "question", .. }));

        let err = parse_questions(
            r#"[{"id":"a","question":"x"},{"id":"a","question":"y"}]"#,
            Split::Dev,
            &origin(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(id) if id == "a"));

        assert!(matches!(
            parse_questions("[{", Split::Dev, &origin()).unwrap_err(),
            CorpusError::Json { .. }
        ));
        assert!(matches!(
            parse_questions(r#"[{"id":"a","question":"  "}]"#, Split::Dev, &origin()).unwrap_err(),
            CorpusError::EmptyQuestion { index: 0, .. }
        ));
    }

    #[test]
    fn labels_follow_null_convention() {
        let labels = parse_labels(
            r#"{"q1":"SELECT count(*) FROM admissions","q2":"null","q3":"  NULL "}"#,
            &origin(),
        )
        .unwrap();
        assert_eq!(
            labels["q1"],
            GoldLabel::Answerable("SELECT count(*) FROM admissions".into())
        );
        assert_eq!(labels["q2"], GoldLabel::Unanswerable);
        assert_eq!(labels["q3"], GoldLabel::Unanswerable);
    }

    #[test]
    fn label_errors() {
        assert!(matches!(
            parse_labels(r#"{"q1":""}"#, &origin()).unwrap_err(),
            CorpusError::EmptyLabel(_)
        ));
        assert!(matches!(
            parse_labels(r#"["q1"]"#, &origin()).unwrap_err(),
            CorpusError::BadLabelRoot
        ));
        assert!(matches!(
            parse_labels(r#"{"q1":"null","q1":"SELECT 1"}"#, &origin()).unwrap_err(),
            CorpusError::DuplicateId(id) if id == "q1"
        ));
    }

    #[test]
    fn attach_and_count() {
        let qs = parse_questions(
            r#"[{"id":"q1","question":"a"},{"id":"q2","question":"b"}]"#,
            Split::Train,
            &origin(),
        )
        .unwrap();
        let labels = parse_labels(r#"{"q1":"SELECT 1"}"#, &origin()).unwrap();
        let labeled = attach_labels(&qs, &labels).unwrap();
        assert_eq!(
            dataset_stats(&labeled),
            DatasetStats {
                n_total: 2,
                n_answerable: 1,
                n_unanswerable: 0,
                n_unlabeled: 1
            }
        );
        let bad = parse_labels(r#"{"zz":"SELECT 1"}"#, &origin()).unwrap();
        assert!(matches!(
            attach_labels(&qs, &bad).unwrap_err(),
            CorpusError::UnknownLabelId(id) if id == "zz"
        ));
        assert_eq!(dataset_stats(&[]), DatasetStats::default());
    }

    #[test]
    fn stats_on_mixed_fixture() {
        let qs: Vec<QuestionInstance> = (0..5)
            .map(|i| QuestionInstance {
                id: format!("q{i}"),
                text: "t".into(),
                split: Split::Train,
                gold: if i < 3 {
                    GoldLabel::Answerable("SELECT 1".into())
                } else {
                    GoldLabel::Unanswerable
                },
            })
            .collect();
        assert_eq!(
            dataset_stats(&qs),
            DatasetStats {
                n_total: 5,
                n_answerable: 3,
                n_unanswerable: 2,
                n_unlabeled: 0
            }
        );
    }

    #[test]
    fn submission_rendering() {
        let preds = vec![
            Prediction::new("q2", Decision::Abstain, DecidedBy::Model, None),
            Prediction::new("q1", Decision::Generate("SELECT 1".into()), DecidedBy::Postprocess, Some(0.0)),
        ];
        let text = render_predictions(&preds).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v, serde_json::json!({"q1":"SELECT 1","q2":"null"}));
        assert!(text.find("q1").unwrap() < text.find("q2").unwrap());
        assert_eq!(render_predictions(&[]).unwrap().trim(), "{}");

        let dup = vec![preds[0].clone(), preds[0].clone()];
        assert!(matches!(render_predictions(&dup), Err(CorpusError::DuplicateId(_))));
    }

    #[test]
    fn cosine_examples() {
        let x = emb("x", &[1.0, 0.0]);
        let y = emb("y", &[0.0, 1.0]);
        let d = emb("d", &[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]);
        let m = SimilarityMode::AllPairs;
        assert!((mean_cross_similarity(std::slice::from_ref(&x), std::slice::from_ref(&x), m).unwrap() - 1.0).abs() < 1e-12);
        assert!(mean_cross_similarity(std::slice::from_ref(&x), std::slice::from_ref(&y), m).unwrap().abs() < 1e-12);
        // (sqrt(2)/2 + sqrt(2)/2) / 2
        let v = mean_cross_similarity(&[x.clone(), y.clone()], std::slice::from_ref(&d), m).unwrap();
        assert!((v - 0.707_106_781_186_547_5).abs() < 1e-12);

        // Nearest neighbour picks the best match per row.
        let nn = mean_cross_similarity(std::slice::from_ref(&x), &[x.clone(), y.clone()], SimilarityMode::NearestNeighbor)
            .unwrap();
        assert!((nn - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        let m = SimilarityMode::AllPairs;
        let x = emb("x", &[1.0, 0.0]);
        assert!(matches!(
            mean_cross_similarity(std::slice::from_ref(&x), &[emb("z", &[1.0, 0.0, 0.0])], m),
            Err(CorpusError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            mean_cross_similarity(std::slice::from_ref(&x), &[emb("z", &[0.0, 0.0])], m),
            Err(CorpusError::ZeroNorm(_))
        ));
        assert!(matches!(
            mean_cross_similarity(&[], &[x], m),
            Err(CorpusError::EmptyEmbeddings)
        ));
    }
}
