//! Max-token entropy scoring, quantile threshold calibration and the entropy filter.
//!
//! Endpoints expose only the top-k alternatives per position, so the mass they
//! leave uncovered is lumped into a single residual bucket. The resulting
//! entropy is a lower bound on the full-vocabulary entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::GenerationOutput;

/// Slack allowed on probabilities that should be at most one.
pub const PROB_EPSILON: f64 = 1e-6;

/// Default share of predictions treated as too uncertain to answer.
pub const DEFAULT_RHO: f64 = 0.07;

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("token has no alternatives")]
    EmptyAlternatives,
    #[error("alternative probability {0} exceeds 1")]
    ProbabilityAboveOne(f64),
    #[error("alternative probabilities sum to {0}, above 1")]
    MassAboveOne(f64),
    #[error("log-probability is not a number")]
    NotANumber,
    #[error("generation for `{0}` has no tokens")]
    NoTokens(String),
    #[error("cannot calibrate a threshold on an empty population")]
    EmptyPopulation,
    #[error("rho must lie strictly between 0 and 1, got {0}")]
    RhoOutOfRange(f64),
    #[error("prediction `{0}` generates SQL but carries no entropy")]
    MissingEntropy(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Generate(String),
    Abstain,
}

impl Decision {
    pub fn is_generate(&self) -> bool {
        matches!(self, Decision::Generate(_))
    }

    pub fn sql(&self) -> Option<&str> {
        match self {
            Decision::Generate(sql) => Some(sql),
            Decision::Abstain => None,
        }
    }
}

/// Pipeline stage that produced the current decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    Model,
    Postprocess,
    EntropyFilter,
    ExecutionFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub decision: Decision,
    pub decided_by: DecidedBy,
    /// Max-token entropy in nats; absent when there was no token data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_entropy: Option<f64>,
}

impl Prediction {
    pub fn new(
        question_id: impl Into<String>,
        decision: Decision,
        decided_by: DecidedBy,
        max_entropy: Option<f64>,
    ) -> Self {
        Self {
            question_id: question_id.into(),
            decision,
            decided_by,
            max_entropy,
        }
    }

    /// Turns this prediction into an abstention attributed to `stage`.
    pub fn abstain(&mut self, stage: DecidedBy) {
        self.decision = Decision::Abstain;
        self.decided_by = stage;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyThreshold {
    pub value: f64,
    pub calibration_rho: f64,
    pub population_size: usize,
}

impl EntropyThreshold {
    pub fn filters(&self, entropy: f64) -> bool {
        entropy >= self.value
    }
}

/// Shannon entropy (nats) of one position given its top alternatives as log-probabilities.
pub fn token_entropy(logprobs: &[f64]) -> Result<f64, ConfidenceError> {
    if logprobs.is_empty() {
        return Err(ConfidenceError::EmptyAlternatives);
    }
    let mut mass = 0.0;
    let mut entropy = 0.0;
    for &lp in logprobs {
        if lp.is_nan() {
            return Err(ConfidenceError::NotANumber);
        }
        let p = lp.exp();
        if p > 1.0 + PROB_EPSILON {
            return Err(ConfidenceError::ProbabilityAboveOne(p));
        }
        if p > 0.0 {
            entropy -= p * lp;
        }
        mass += p;
    }
    if mass > 1.0 + PROB_EPSILON {
        return Err(ConfidenceError::MassAboveOne(mass));
    }
    let rest = (1.0 - mass).max(0.0);
    if rest > 0.0 {
        entropy -= rest * rest.ln();
    }
    // -p ln p with p a hair above one comes out as a tiny negative.
    Ok(entropy.max(0.0))
}

/// Entropy of the most uncertain token in the output.
pub fn prediction_entropy(output: &GenerationOutput) -> Result<f64, ConfidenceError> {
    if output.tokens.is_empty() {
        return Err(ConfidenceError::NoTokens(output.question_id.clone()));
    }
    output.tokens.iter().try_fold(0.0_f64, |acc, token| {
        let lps: Vec<f64> = token.alternatives.iter().map(|a| a.logprob).collect();
        Ok(acc.max(token_entropy(&lps)?))
    })
}

/// Number of items at the top of a population of `n` covered by share `rho`.
///
/// `rho * n` is snapped before the ceiling so that products like
/// `0.07 * 100 = 7.000000000000001` count as 7.
pub fn nearest_rank(rho: f64, n: usize) -> usize {
    let x = rho * n as f64;
    let snapped = (x * 1e9).round() / 1e9;
    (snapped.ceil() as usize).clamp(1, n.max(1))
}

/// Nearest-rank threshold: the m-th largest entropy with m = ceil(rho * n).
pub fn calibrate_threshold(entropies: &[f64], rho: f64) -> Result<EntropyThreshold, ConfidenceError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(ConfidenceError::RhoOutOfRange(rho));
    }
    if entropies.is_empty() {
        return Err(ConfidenceError::EmptyPopulation);
    }
    if entropies.iter().any(|e| e.is_nan()) {
        return Err(ConfidenceError::NotANumber);
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let m = nearest_rank(rho, sorted.len());
    Ok(EntropyThreshold {
        value: sorted[m - 1],
        calibration_rho: rho,
        population_size: sorted.len(),
    })
}

/// Entropies of the predictions that still generate SQL, in input order.
pub fn generating_entropies(predictions: &[Prediction]) -> Result<Vec<f64>, ConfidenceError> {
    predictions
        .iter()
        .filter(|p| p.decision.is_generate())
        .map(|p| {
            p.max_entropy
                .ok_or_else(|| ConfidenceError::MissingEntropy(p.question_id.clone()))
        })
        .collect()
}

pub fn apply_entropy_filter(
    predictions: &[Prediction],
    threshold: &EntropyThreshold,
) -> Result<Vec<Prediction>, ConfidenceError> {
    predictions
        .iter()
        .map(|p| {
            let mut p = p.clone();
            if p.decision.is_generate() {
                let h = p
                    .max_entropy
                    .ok_or_else(|| ConfidenceError::MissingEntropy(p.question_id.clone()))?;
                if threshold.filters(h) {
                    p.abstain(DecidedBy::EntropyFilter);
                }
            }
            Ok(p)
        })
        .collect()
}
