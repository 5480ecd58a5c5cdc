//! Per-instance reliability outcomes and the penalised Reliability Score.
//!
//! Each instance earns 1 for a correct query on an answerable question or an
//! abstention on an unanswerable one, 0 for abstaining on an answerable
//! question, and `-c` for a wrong query or any query on an unanswerable
//! question. The score is the mean, scaled to percent.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};
use thiserror::Error;

use crate::confidence::{Decision, Prediction};
use crate::corpus::GoldLabel;
use crate::execution::{results_match, ExecutionStatus, ReadOnlyDb};

#[derive(Debug, Error)]
pub enum ReliabilityError {
    #[error("question `{0}` has no gold label")]
    Unlabeled(String),
    #[error("gold SQL for `{id}` failed to execute: {reason}")]
    GoldFailed { id: String, reason: String },
    #[error("cannot score an empty outcome list")]
    Empty,
    #[error("invalid penalty `{0}`")]
    BadPenalty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldKind {
    Answerable,
    Unanswerable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub question_id: String,
    pub gold_kind: GoldKind,
    pub generated: bool,
    /// Only defined for answerable questions that received a query.
    pub correct: Option<bool>,
}

impl InstanceOutcome {
    pub fn new(question_id: impl Into<String>, gold_kind: GoldKind, generated: bool, correct: bool) -> Self {
        let correct = (gold_kind == GoldKind::Answerable && generated).then_some(correct);
        Self {
            question_id: question_id.into(),
            gold_kind,
            generated,
            correct,
        }
    }
}

/// A penalty value, or `N`: the size of the scored population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Fixed(f64),
    PopulationSize,
}

impl Penalty {
    pub const DEFAULTS: [Penalty; 4] = [
        Penalty::Fixed(0.0),
        Penalty::Fixed(5.0),
        Penalty::Fixed(10.0),
        Penalty::PopulationSize,
    ];

    pub fn resolve(self, n: usize) -> f64 {
        match self {
            Penalty::Fixed(c) => c,
            Penalty::PopulationSize => n as f64,
        }
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Penalty::Fixed(c) => write!(f, "{c}"),
            Penalty::PopulationSize => f.write_str("N"),
        }
    }
}

impl FromStr for Penalty {
    type Err = ReliabilityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "N" || s == "n" {
            return Ok(Penalty::PopulationSize);
        }
        match s.parse::<f64>() {
            Ok(c) if c >= 0.0 && c.is_finite() => Ok(Penalty::Fixed(c)),
            _ => Err(ReliabilityError::BadPenalty(s.to_string())),
        }
    }
}

impl Serialize for Penalty {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Penalty {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(c) => c.to_string().parse(),
            Raw::Str(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Decides `generated` and, where defined, `correct` for one prediction by
/// executing predicted and gold SQL and comparing the result multisets.
pub fn judge(prediction: &Prediction, gold: &GoldLabel, db: &ReadOnlyDb, timeout_ms: u64, tol: f64) -> Result<InstanceOutcome, ReliabilityError> {
    let id = prediction.question_id.clone();
    match (gold, &prediction.decision) {
        (GoldLabel::Unlabeled, _) => Err(ReliabilityError::Unlabeled(id)),
        (GoldLabel::Unanswerable, d) => Ok(InstanceOutcome::new(id, GoldKind::Unanswerable, d.is_generate(), false)),
        (GoldLabel::Answerable(_), Decision::Abstain) => Ok(InstanceOutcome::new(id, GoldKind::Answerable, false, false)),
        (GoldLabel::Answerable(gold_sql), Decision::Generate(pred_sql)) => {
            let gold_out = db.execute(gold_sql, timeout_ms);
            match &gold_out.status {
                ExecutionStatus::Ok { .. } => {}
                ExecutionStatus::Error { message } => {
                    return Err(ReliabilityError::GoldFailed { id, reason: message.clone() })
                }
                ExecutionStatus::Timeout => {
                    return Err(ReliabilityError::GoldFailed { id, reason: "timeout".into() })
                }
            }
            let pred_out = db.execute(pred_sql, timeout_ms);
            let correct = results_match(&pred_out, &gold_out, tol).unwrap_or(false);
            Ok(InstanceOutcome::new(id, GoldKind::Answerable, true, correct))
        }
    }
}

/// Per-instance score under penalty `c`.
pub fn phi(outcome: &InstanceOutcome, c: f64) -> f64 {
    match (outcome.gold_kind, outcome.generated, outcome.correct) {
        (GoldKind::Answerable, true, Some(true)) => 1.0,
        (GoldKind::Answerable, false, _) => 0.0,
        (GoldKind::Answerable, true, _) => -c,
        (GoldKind::Unanswerable, true, _) => -c,
        (GoldKind::Unanswerable, false, _) => 1.0,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub ans_correct: usize,
    pub ans_wrong: usize,
    pub ans_abstain: usize,
    pub una_attempt: usize,
    pub una_abstain: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.ans_correct + self.ans_wrong + self.ans_abstain + self.una_attempt + self.una_abstain
    }

    pub fn rewarded(&self) -> usize {
        self.ans_correct + self.una_abstain
    }

    pub fn penalized(&self) -> usize {
        self.ans_wrong + self.una_attempt
    }

    fn add(&mut self, o: &InstanceOutcome) {
        match (o.gold_kind, o.generated, o.correct) {
            (GoldKind::Answerable, true, Some(true)) => self.ans_correct += 1,
            (GoldKind::Answerable, true, _) => self.ans_wrong += 1,
            (GoldKind::Answerable, false, _) => self.ans_abstain += 1,
            (GoldKind::Unanswerable, true, _) => self.una_attempt += 1,
            (GoldKind::Unanswerable, false, _) => self.una_abstain += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    pub n: usize,
    pub counts: OutcomeCounts,
    /// Score per penalty, in percent, in the order requested.
    pub rs: Vec<(Penalty, f64)>,
}

impl ReliabilityReport {
    pub fn from_counts(counts: OutcomeCounts, penalties: &[Penalty]) -> Result<Self, ReliabilityError> {
        let n = counts.total();
        if n == 0 {
            return Err(ReliabilityError::Empty);
        }
        let rs = penalties
            .iter()
            .map(|&p| {
                let c = p.resolve(n);
                let score = 100.0 * (counts.rewarded() as f64 - c * counts.penalized() as f64) / n as f64;
                (p, score)
            })
            .collect();
        Ok(Self { n, counts, rs })
    }

    pub fn rs(&self, penalty: Penalty) -> Option<f64> {
        self.rs.iter().find(|(p, _)| *p == penalty).map(|(_, v)| *v)
    }

    pub fn to_json(&self, label: &str) -> Value {
        let rs: serde_json::Map<String, Value> =
            self.rs.iter().map(|(p, v)| (p.to_string(), json!(v))).collect();
        json!({
            "label": label,
            "n": self.n,
            "counts": self.counts,
            "rs": rs,
        })
    }
}

pub fn score(outcomes: &[InstanceOutcome], penalties: &[Penalty]) -> Result<ReliabilityReport, ReliabilityError> {
    let mut counts = OutcomeCounts::default();
    for o in outcomes {
        counts.add(o);
    }
    ReliabilityReport::from_counts(counts, penalties)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Table,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format `{s}`")),
        }
    }
}

/// Renders labelled reports as a fixed-width table (two decimals) or JSON
/// (full precision plus counts). Table columns follow the first report's penalties.
pub fn render_report(reports: &[(String, ReliabilityReport)], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let arr: Vec<Value> = reports.iter().map(|(label, r)| r.to_json(label)).collect();
            let mut s = serde_json::to_string_pretty(&arr).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => {
            let penalties: Vec<Penalty> = reports
                .first()
                .map(|(_, r)| r.rs.iter().map(|(p, _)| *p).collect())
                .unwrap_or_else(|| Penalty::DEFAULTS.to_vec());
            let label_width = reports
                .iter()
                .map(|(l, _)| l.chars().count())
                .chain(std::iter::once("label".len()))
                .max()
                .unwrap_or(5);
            let mut out = String::new();
            let _ = write!(out, "{:<label_width$}", "label");
            for p in &penalties {
                let _ = write!(out, " {:>10}", format!("RS({p})"));
            }
            out.push('\n');
            for (label, r) in reports {
                let _ = write!(out, "{label:<label_width$}");
                for p in &penalties {
                    match r.rs(*p) {
                        Some(v) => {
                            let _ = write!(out, " {v:>10.2}");
                        }
                        None => {
                            let _ = write!(out, " {:>10}", "-");
                        }
                    }
                }
                out.push('\n');
            }
            out
        }
    }
}
