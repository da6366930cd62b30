//! Evaluation, manifests and the synthetic corpus.

mod auc;
mod manifest;
mod report;
pub mod synth;

pub use auc::auc;
pub use manifest::{
    read_external_manifest, read_jsonl, read_manifest, write_jsonl, ClipRecord, Condition, Domain, ExternalRecord,
    Split, Tags,
};
pub use report::{
    evaluate_scores, scores_from_tsv, scores_to_tsv, EvalReport, MachineReport, ScoredClip, SCORE_HEADER,
};
pub use synth::{generate_synthetic_corpus, synthesize, CorpusSummary, SynthSpec};
