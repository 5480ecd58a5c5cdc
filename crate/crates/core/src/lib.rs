//! Reliability-gated text-to-SQL toolchain.
//!
//! The pipeline turns a question corpus into prompts, collects generations
//! with token log-probabilities, abstains on uncertain or non-executable
//! queries, builds null-augmented fine-tuning sets from the abstentions and
//! scores the final predictions with the penalised Reliability Score.

pub mod confidence;
pub mod config;
pub mod corpus;
pub mod execution;
pub mod generation;
pub mod pipeline;
pub mod prompting;
pub mod reliability;
pub mod schema;
pub mod selftrain;
pub mod sqltext;

pub use confidence::{DecidedBy, Decision, EntropyThreshold, Prediction};
pub use config::PipelineConfig;
pub use corpus::{GoldLabel, QuestionInstance, Split};
pub use execution::{ExecutionOutcome, ReadOnlyDb, Validity};
pub use generation::{Backend, GenerationOutput, GenerationParams, TokenInfo};
pub use reliability::{InstanceOutcome, Penalty, ReliabilityReport};
