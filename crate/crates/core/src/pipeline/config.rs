use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{K_SOURCE, K_TARGET, K_TARGET_PSEUDO};
use crate::error::{invalid, Result};
use crate::features::TripletConfig;
use crate::model::Architecture;
use crate::selector::SelectionConfig;

/// Which annotations form the class labels of original clips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Machine,
    MachineAttribute,
}

/// Optimization settings shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mixup_prob: f64,
    /// Dynamic AdaCos scale updates; the fixed initial scale is used when off.
    pub adaptive_scale: bool,
    /// Conv channels per block, applied to all three branches.
    pub widths: Vec<usize>,
    pub triplet: TripletConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 100,
            lr: 1e-3,
            weight_decay: 1e-2,
            mixup_prob: 0.5,
            adaptive_scale: false,
            widths: vec![16, 32, 64],
            triplet: TripletConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> Architecture {
        Architecture::with_widths(&self.widths)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return invalid(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return invalid(format!(
                "lr {} must be positive and weight_decay {} nonnegative",
                self.lr, self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.mixup_prob) {
            return invalid(format!("mixup_prob {} outside [0, 1]", self.mixup_prob));
        }
        self.triplet.validate()?;
        self.arch().validate()
    }
}

/// Cluster counts for representatives and pseudo-labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k_source: usize,
    pub k_target: usize,
    pub k_target_pseudo: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_source: K_SOURCE,
            k_target: K_TARGET,
            k_target_pseudo: K_TARGET_PSEUDO,
        }
    }
}

/// Settings of a whole iterative run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Number of stages `M_max`.
    pub stages: u32,
    pub label_source: LabelSource,
    pub use_triplet: bool,
    pub use_pseudo: bool,
    pub use_external: bool,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
    pub clusters: ClusterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stages: 2,
            label_source: LabelSource::Machine,
            use_triplet: true,
            use_pseudo: true,
            use_external: true,
            train: TrainConfig::default(),
            selection: SelectionConfig::default(),
            clusters: ClusterConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return invalid("stages must be at least 1");
        }
        self.train.validate()?;
        self.selection.validate()?;
        let c = self.clusters;
        if c.k_source == 0 || c.k_target == 0 || c.k_target_pseudo == 0 {
            return invalid("cluster counts must be positive");
        }
        Ok(())
    }

    /// Settings of stage `m`; stage 1 never uses pseudo-labels or external data.
    pub fn stage(&self, m: u32) -> StageConfig {
        let later = m >= 2;
        StageConfig {
            stage: m,
            seed: self.seed + m as u64,
            label_source: self.label_source,
            use_triplet: self.use_triplet,
            use_pseudo: self.use_pseudo && later,
            use_external: self.use_external && later,
            train: self.train.clone(),
            selection: self.selection,
            clusters: self.clusters,
        }
    }
}

/// Settings of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u32,
    pub seed: u64,
    pub label_source: LabelSource,
    pub use_triplet: bool,
    pub use_pseudo: bool,
    pub use_external: bool,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
    pub clusters: ClusterConfig,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage == 0 {
            return invalid("stage index starts at 1");
        }
        if self.stage == 1 && (self.use_pseudo || self.use_external) {
            return invalid("stage 1 uses neither pseudo-labels nor external data");
        }
        self.train.validate()?;
        self.selection.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
