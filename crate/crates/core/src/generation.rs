//! Model backends that return text with per-token log-probabilities, and the
//! post-processing that turns raw text into SQL or an abstention.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::confidence::{prediction_entropy, ConfidenceError, DecidedBy, Decision, Prediction, PROB_EPSILON};
use crate::corpus::NULL_LABEL;
use crate::prompting::{chat_messages, PromptBundle};
use crate::sqltext;

pub const DEFAULT_K_TOP: usize = 5;
pub const MAX_K_TOP: usize = 20;
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("backend rejected the credentials (HTTP {0})")]
    Auth(u16),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no fixture entry for question `{0}`")]
    MissingFixture(String),
    #[error("failed to read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("invalid token data for `{id}` at position {position}: {reason}")]
    InvalidToken { id: String, position: usize, reason: String },
    #[error("credential variable `{0}` is not set")]
    MissingCredential(String),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

impl GenerationError {
    /// Errors worth another attempt: transport failures, rate limits and 5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            GenerationError::Http { status, .. } => *status == 429 || *status >= 500,
            GenerationError::Io { .. } => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub token_text: String,
    pub logprob: f64,
    /// Top alternatives by descending log-probability; always includes the chosen token.
    pub alternatives: Vec<Alternative>,
}

impl TokenInfo {
    /// Normalises raw endpoint data: sorts alternatives, inserts the chosen
    /// token if the endpoint left it out and truncates to `k_top` entries.
    pub fn from_parts(token_text: String, logprob: f64, mut alternatives: Vec<Alternative>, k_top: usize) -> Self {
        if !alternatives.iter().any(|a| a.token == token_text) {
            alternatives.push(Alternative {
                token: token_text.clone(),
                logprob,
            });
        }
        alternatives.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        while alternatives.len() > k_top.max(1) {
            let drop = alternatives
                .iter()
                .rposition(|a| a.token != token_text)
                .expect("more than one alternative");
            alternatives.remove(drop);
        }
        Self {
            token_text,
            logprob,
            alternatives,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let max_lp = PROB_EPSILON.ln_1p();
        if self.logprob.is_nan() || self.logprob > max_lp {
            return Err(format!("log-probability {} is positive", self.logprob));
        }
        if !self.alternatives.iter().any(|a| a.token == self.token_text) {
            return Err("chosen token missing from alternatives".into());
        }
        let mut mass = 0.0;
        let mut prev = f64::INFINITY;
        for a in &self.alternatives {
            if a.logprob.is_nan() || a.logprob > max_lp {
                return Err(format!("alternative log-probability {} is positive", a.logprob));
            }
            if a.logprob > prev {
                return Err("alternatives are not sorted by descending log-probability".into());
            }
            prev = a.logprob;
            mass += a.logprob.exp();
        }
        if mass > 1.0 + PROB_EPSILON {
            return Err(format!("alternative probabilities sum to {mass}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub question_id: String,
    pub raw_text: String,
    pub tokens: Vec<TokenInfo>,
    pub finish_reason: FinishReason,
}

impl GenerationOutput {
    pub fn tokens_match_text(&self) -> bool {
        self.tokens.iter().map(|t| t.token_text.as_str()).collect::<String>() == self.raw_text
    }

    fn validate(&self) -> Result<(), GenerationError> {
        for (position, t) in self.tokens.iter().enumerate() {
            t.validate().map_err(|reason| GenerationError::InvalidToken {
                id: self.question_id.clone(),
                position,
                reason,
            })?;
        }
        if !self.tokens.is_empty() && !self.tokens_match_text() {
            log::warn!(
                "tokens for `{}` do not concatenate to the returned text",
                self.question_id
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub k_top: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model_name: "gpt-3.5-turbo-0125".into(),
            temperature: 0.0,
            max_tokens: 512,
            k_top: DEFAULT_K_TOP,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GenerationError::InvalidParams("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(GenerationError::InvalidParams("max_tokens must be positive".into()));
        }
        if !(1..=MAX_K_TOP).contains(&self.k_top) {
            return Err(GenerationError::InvalidParams(format!(
                "k_top must be in [1, {MAX_K_TOP}]"
            )));
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn generate(
        &self,
        question_id: &str,
        bundle: &PromptBundle,
        params: &GenerationParams,
    ) -> Result<GenerationOutput, GenerationError>;
}

/// On-disk token record shared by replay fixtures and generation logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureToken {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top: Vec<Alternative>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<FixtureToken>,
    #[serde(default)]
    pub finish_reason: FinishReason,
}

impl From<&GenerationOutput> for FixtureEntry {
    fn from(out: &GenerationOutput) -> Self {
        Self {
            text: out.raw_text.clone(),
            tokens: out
                .tokens
                .iter()
                .map(|t| FixtureToken {
                    token: t.token_text.clone(),
                    logprob: t.logprob,
                    top: t.alternatives.clone(),
                })
                .collect(),
            finish_reason: out.finish_reason,
        }
    }
}

/// Replays canned generations keyed by question id.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    entries: BTreeMap<String, FixtureEntry>,
}

impl ReplayBackend {
    pub fn new(entries: BTreeMap<String, FixtureEntry>) -> Self {
        Self { entries }
    }

    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let io = |message: String| GenerationError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let entries = serde_json::from_str(&text)
            .map_err(|e| GenerationError::Malformed(format!("{}: {e}", path.display())))?;
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn generate(
        &self,
        question_id: &str,
        _bundle: &PromptBundle,
        params: &GenerationParams,
    ) -> Result<GenerationOutput, GenerationError> {
        let entry = self
            .entries
            .get(question_id)
            .ok_or_else(|| GenerationError::MissingFixture(question_id.to_string()))?;
        let tokens = entry
            .tokens
            .iter()
            .map(|t| TokenInfo::from_parts(t.token.clone(), t.logprob, t.top.clone(), params.k_top))
            .collect();
        let out = GenerationOutput {
            question_id: question_id.to_string(),
            raw_text: entry.text.clone(),
            tokens,
            finish_reason: entry.finish_reason,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Renders outputs in the replay fixture layout, keyed and sorted by id.
pub fn render_generation_log(outputs: &[GenerationOutput]) -> String {
    let map: BTreeMap<&str, FixtureEntry> = outputs
        .iter()
        .map(|o| (o.question_id.as_str(), FixtureEntry::from(o)))
        .collect();
    let mut text = serde_json::to_string_pretty(&map).expect("fixture map serializes");
    text.push('\n');
    text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): doubles each time, capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(32))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

/// Chat-completion client that requests top-k log-probabilities.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, retry: RetryPolicy, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            retry,
            agent,
        }
    }

    pub fn request_body(bundle: &PromptBundle, params: &GenerationParams) -> Value {
        json!({
            "model": params.model_name,
            "messages": chat_messages(bundle),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "logprobs": true,
            "top_logprobs": params.k_top,
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, GenerationError> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let io = |e: ureq::Error| GenerationError::Io {
            path: self.endpoint.clone(),
            message: e.to_string(),
        };
        let mut resp = req.send(body.to_string()).map_err(io)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(io)?;
        match status {
            200..=299 => Ok(text),
            401 | 403 => Err(GenerationError::Auth(status)),
            _ => Err(GenerationError::Http { status, body: text }),
        }
    }
}

impl Backend for HttpBackend {
    fn generate(
        &self,
        question_id: &str,
        bundle: &PromptBundle,
        params: &GenerationParams,
    ) -> Result<GenerationOutput, GenerationError> {
        let body = Self::request_body(bundle, params);
        let mut attempt = 0;
        let text = loop {
            match self.attempt(&body) {
                Ok(text) => break text,
                Err(e) if e.is_transient() => {
                    if attempt >= self.retry.max_retries {
                        log::warn!("giving up on `{question_id}` after {} attempts: {e}", attempt + 1);
                        return Ok(GenerationOutput {
                            question_id: question_id.to_string(),
                            raw_text: String::new(),
                            tokens: Vec::new(),
                            finish_reason: FinishReason::Error,
                        });
                    }
                    log::debug!("transient failure for `{question_id}` (attempt {}): {e}", attempt + 1);
                    thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let out = parse_chat_completion(question_id, &text, params.k_top)?;
        out.validate()?;
        Ok(out)
    }
}

#[derive(Deserialize)]
struct WireTop {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireTop>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// Parses a chat-completion response body into a generation output.
pub fn parse_chat_completion(question_id: &str, body: &str, k_top: usize) -> Result<GenerationOutput, GenerationError> {
    let resp: WireResponse = serde_json::from_str(body).map_err(|e| GenerationError::Malformed(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GenerationError::Malformed("response has no choices".into()))?;
    let tokens = choice
        .logprobs
        .and_then(|l| l.content)
        .unwrap_or_default()
        .into_iter()
        .map(|t| {
            let alts = t
                .top_logprobs
                .into_iter()
                .map(|a| Alternative {
                    token: a.token,
                    logprob: a.logprob,
                })
                .collect();
            TokenInfo::from_parts(t.token, t.logprob, alts, k_top)
        })
        .collect();
    let finish_reason = match choice.finish_reason.as_deref() {
        None | Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    Ok(GenerationOutput {
        question_id: question_id.to_string(),
        raw_text: choice.message.content.unwrap_or_default(),
        tokens,
        finish_reason,
    })
}

/// Runs the backend over every prompt with at most `parallelism` requests in
/// flight. Results come back sorted by question id.
pub fn generate_all(
    backend: &dyn Backend,
    prompts: &[(String, PromptBundle)],
    params: &GenerationParams,
    parallelism: usize,
) -> Result<Vec<GenerationOutput>, GenerationError> {
    params.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| GenerationError::Pool(e.to_string()))?;
    let mut outputs = pool.install(|| {
        prompts
            .par_iter()
            .map(|(id, bundle)| backend.generate(id, bundle, params))
            .collect::<Result<Vec<_>, _>>()
    })?;
    outputs.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Postprocessed {
    Generate(String),
    Abstain,
}

fn is_language_tag(line: &str) -> bool {
    line.trim()
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+'))
}

/// Contents of the first fenced block, or the whole text if there is none.
fn strip_fences(text: &str) -> &str {
    let Some(open) = text.find("```") else {
        return text;
    };
    let mut body = &text[open + 3..];
    if let Some((first, rest)) = body.split_once('\n') {
        if is_language_tag(first) {
            body = rest;
        }
    } else if is_language_tag(body.trim_end_matches('`')) {
        return "";
    }
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

pub fn postprocess(raw_text: &str) -> Postprocessed {
    let unfenced = strip_fences(raw_text).trim();
    match sqltext::first_statement(unfenced) {
        Some(stmt) if !stmt.eq_ignore_ascii_case(NULL_LABEL) => Postprocessed::Generate(stmt.to_string()),
        _ => Postprocessed::Abstain,
    }
}

/// First-pass decision for one output: post-processed text plus its max-token entropy.
pub fn to_prediction(output: &GenerationOutput) -> Result<Prediction, ConfidenceError> {
    let entropy = if output.tokens.is_empty() {
        None
    } else {
        Some(prediction_entropy(output)?)
    };
    let (decision, decided_by) = if output.finish_reason == FinishReason::Error {
        (Decision::Abstain, DecidedBy::Postprocess)
    } else {
        match postprocess(&output.raw_text) {
            Postprocessed::Generate(sql) => (Decision::Generate(sql), DecidedBy::Postprocess),
            Postprocessed::Abstain => (Decision::Abstain, DecidedBy::Model),
        }
    };
    Ok(Prediction::new(output.question_id.clone(), decision, decided_by, entropy))
}
