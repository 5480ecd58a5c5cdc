//! Prompt assembly and chat-format fine-tuning records.
//!
//! A prompt template is a text file split into four sections, each opened by
//! a `[[name]]` line:
//!
//! ```text
//! [[system]]
//! You translate questions into SQLite queries.
//! [[instruction]]
//! If the question cannot be answered from the database, reply with null.
//! [[schema]]
//! Database schema:
//! {schema}
//! [[user]]
//! {question}
//! ```
//!
//! The system message is the `system` section, followed by the `instruction`
//! and `schema` sections when their features are switched on, separated by a
//! blank line. `{schema}` may only appear in the schema section and
//! `{question}` must appear exactly once, in the user section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldLabel, QuestionInstance, NULL_LABEL};

const SCHEMA_SLOT: &str = "{schema}";
const QUESTION_SLOT: &str = "{question}";

pub const DEFAULT_TEMPLATE: &str = "\
[[system]]
You are an expert assistant that converts questions about electronic health records into SQL queries for the MIMIC-IV demo database (SQLite). Reply with a single SQL query and nothing else.
[[instruction]]
Some questions cannot be answered with this database: they ask for information that no table stores, or they need knowledge from outside the database. If the question is unanswerable, or you cannot write a query that answers it, reply with exactly: null
[[schema]]
The database has the following tables:
{schema}
[[user]]
{question}
";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("failed to read template {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("template section `{0}` is missing")]
    MissingSection(&'static str),
    #[error("unknown template section `{0}`")]
    UnknownSection(String),
    #[error("template section `{0}` appears twice")]
    RepeatedSection(String),
    #[error("text before the first section header")]
    StrayText,
    #[error("placeholder {placeholder} is not allowed in section `{section}`")]
    MisplacedPlaceholder {
        placeholder: &'static str,
        section: &'static str,
    },
    #[error("the user section must contain {{question}} exactly once")]
    QuestionSlot,
    #[error("question `{0}` has no gold label")]
    Unlabeled(String),
    #[error("question `{0}` has empty text")]
    EmptyQuestion(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFeatures {
    pub include_schema: bool,
    pub include_unans_instruction: bool,
}

impl Default for PromptFeatures {
    fn default() -> Self {
        Self {
            include_schema: true,
            include_unans_instruction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    system: String,
    instruction: String,
    schema: String,
    user: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("built-in template is well formed")
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        const NAMES: [&str; 4] = ["system", "instruction", "schema", "user"];
        let mut sections: [Option<Vec<&str>>; 4] = Default::default();
        let mut current: Option<usize> = None;
        for line in text.lines() {
            let header = line
                .trim()
                .strip_prefix("[[")
                .and_then(|l| l.strip_suffix("]]"));
            if let Some(name) = header {
                let idx = NAMES
                    .iter()
                    .position(|n| *n == name)
                    .ok_or_else(|| PromptError::UnknownSection(name.to_string()))?;
                if sections[idx].is_some() {
                    return Err(PromptError::RepeatedSection(name.to_string()));
                }
                sections[idx] = Some(Vec::new());
                current = Some(idx);
            } else if let Some(idx) = current {
                sections[idx].as_mut().unwrap().push(line);
            } else if !line.trim().is_empty() {
                return Err(PromptError::StrayText);
            }
        }
        let mut take = |i: usize| -> Result<String, PromptError> {
            sections[i]
                .take()
                .map(|lines| lines.join("\n").trim_matches('\n').to_string())
                .ok_or(PromptError::MissingSection(NAMES[i]))
        };
        let template = Self {
            system: take(0)?,
            instruction: take(1)?,
            schema: take(2)?,
            user: take(3)?,
        };
        for (section, body) in [
            ("system", &template.system),
            ("instruction", &template.instruction),
            ("user", &template.user),
        ] {
            if body.contains(SCHEMA_SLOT) {
                return Err(PromptError::MisplacedPlaceholder {
                    placeholder: SCHEMA_SLOT,
                    section,
                });
            }
        }
        for (section, body) in [
            ("system", &template.system),
            ("instruction", &template.instruction),
            ("schema", &template.schema),
        ] {
            if body.contains(QUESTION_SLOT) {
                return Err(PromptError::MisplacedPlaceholder {
                    placeholder: QUESTION_SLOT,
                    section,
                });
            }
        }
        if template.user.matches(QUESTION_SLOT).count() != 1 {
            return Err(PromptError::QuestionSlot);
        }
        Ok(template)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PromptError::Io(path.display().to_string(), e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    #[serde(default)]
    pub few_shot: Vec<(String, String)>,
}

/// Single-pass substitution: text inserted for one slot is never rescanned.
fn fill(template: &str, slot: &str, value: &str) -> String {
    template.split(slot).collect::<Vec<_>>().join(value)
}

pub fn build_prompt(
    template: &PromptTemplate,
    question: &QuestionInstance,
    schema_text: &str,
    features: PromptFeatures,
    few_shot: &[(String, String)],
) -> Result<PromptBundle, PromptError> {
    if question.text.trim().is_empty() {
        return Err(PromptError::EmptyQuestion(question.id.clone()));
    }
    let mut blocks = vec![template.system.clone()];
    if features.include_unans_instruction {
        blocks.push(template.instruction.clone());
    }
    if features.include_schema {
        blocks.push(fill(&template.schema, SCHEMA_SLOT, schema_text));
    }
    blocks.retain(|b| !b.is_empty());
    Ok(PromptBundle {
        system_text: blocks.join("\n\n"),
        user_text: fill(&template.user, QUESTION_SLOT, &question.text),
        few_shot: few_shot.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub messages: Vec<Message>,
}

impl FineTuneRecord {
    /// One system message first, then user/assistant turns, ending on assistant.
    pub fn is_well_formed(&self) -> bool {
        let Some((first, rest)) = self.messages.split_first() else {
            return false;
        };
        first.role == Role::System
            && !rest.is_empty()
            && rest.len() % 2 == 0
            && rest.chunks(2).all(|pair| pair[0].role == Role::User && pair[1].role == Role::Assistant)
    }
}

/// Chat messages for a prompt, without the final assistant turn.
pub fn chat_messages(prompt: &PromptBundle) -> Vec<Message> {
    let mut messages = vec![Message::new(Role::System, &prompt.system_text)];
    for (user, assistant) in &prompt.few_shot {
        messages.push(Message::new(Role::User, user));
        messages.push(Message::new(Role::Assistant, assistant));
    }
    messages.push(Message::new(Role::User, &prompt.user_text));
    messages
}

pub fn build_finetune_record(
    question: &QuestionInstance,
    prompt: &PromptBundle,
) -> Result<FineTuneRecord, PromptError> {
    let answer = match &question.gold {
        GoldLabel::Answerable(sql) => sql.as_str(),
        GoldLabel::Unanswerable => NULL_LABEL,
        GoldLabel::Unlabeled => return Err(PromptError::Unlabeled(question.id.clone())),
    };
    let mut messages = chat_messages(prompt);
    messages.push(Message::new(Role::Assistant, answer));
    Ok(FineTuneRecord { messages })
}
