//! Retrieval and noise metrics, evaluation reports.

pub mod metrics;

pub use metrics::{
    align, corpus_wer, edit_count, eer, entity_corrupted, format_percent, hits_at_k, split_entity_noise, wer, Edit,
    EntityLexicon,
};
pub mod report;

pub use report::{ConditionSummary, EvalReport, Scores, SystemResult};
