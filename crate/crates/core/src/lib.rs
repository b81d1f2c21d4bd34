//! Desk-scale end-to-end task-oriented dialog engine.
//!
//! The crate pairs a goal-driven synthetic dialog environment with a tiny
//! decoder-only transformer trained from scratch, and compares context
//! strategies that condition on the full history against Markov strategies
//! that carry only the previous dialog state and response. Evaluation covers
//! Inform/Success/BLEU/Combined, McNemar and matched-pair significance
//! tests, sequence-length and compute cost accounting, and span-aggregated
//! attention analysis.

pub mod analysis;
pub mod context;
pub mod corpus;
pub mod eval;
pub mod lm;
pub mod pipeline;
pub mod state;
pub mod synth;

pub use context::{build_context, build_training_sequence, Strategy, TrainingSequence};
pub use corpus::{partition_labels, split_corpus, Corpus, SplitSpec};
pub use eval::EvalReport;
pub use lm::{LmModel, ModelConfig, Vocab};
pub use state::{
    parse_state, serialize_state, wrap_span, DbResult, Dialog, DialogState, SpanKind, Turn,
    UserGoal,
};
pub use synth::{generate_corpus, markov_gap, query_db, DomainSchema, GenConfig};
