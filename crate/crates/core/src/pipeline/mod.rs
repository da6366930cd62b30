//! Training and the iterative stage protocol.

mod baseline;
mod config;
mod data;
mod stage;
mod train;

pub use baseline::{run_baseline, BaselineRun};
pub use config::{ClusterConfig, LabelSource, PipelineConfig, StageConfig, TrainConfig};
pub use data::{load_clips, load_external, Clip, Corpus, ExternalClip};
pub use stage::{
    clip_label, embed_zcat, iterate, pseudo_label, representatives, run_stage, score_clips, select_external,
    summary_table, ExternalSelection, StageArtifacts, StageMetrics,
};
pub use train::{stratified_batches, train, EpochLoss, TrainItem, TrainOutcome, TRAIN_STREAM};
