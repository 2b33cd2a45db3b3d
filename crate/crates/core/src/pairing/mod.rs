//! Understanding/generation pair construction.
//!
//! Two kinds of pairs come out of the pipeline:
//!
//! * **aligned** pairs, one per non-empty k-means cluster over the joint
//!   feature space, anchored on the cluster medoid whose quadruple carries
//!   both the understanding and the generation annotation;
//! * **retrieved** pairs, built by walking the remaining generation items in
//!   a fixed order and matching each to its top-`n` most similar remaining
//!   understanding items at or above `delta`. Matched understanding items are
//!   consumed immediately.

mod augment;
mod dataset;
mod quadruple;
mod retrieval;

pub use augment::{
    request_augmentation, AugmentError, AugmentationClient, AugmentationRequest, Completion,
    Direction, OfflineAugmenter, StubAugmenter,
};
pub use dataset::{
    build_pair_dataset, compute_stats, read_pairs, verify_pairs, write_pairs, GenSide,
    HistogramBin, KindCounts, PairDataset, PairMeta, PairRecord, PairStats, UndSide, Violation,
    WeightSummary,
};
pub use quadruple::{load_quadruples, read_quadruples, Quadruple, QuadrupleIndex};
pub use retrieval::{build_retrieved, retrieval_order};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{
    fit_minibatch_kmeans, select_medoids, ClusterError, ClusterModel, ClusteringConfig,
};
use crate::features::{FeatureVector, ItemKey};

#[derive(Debug, Error)]
pub enum PairingError {
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("no quadruple for feature {0}")]
    MissingQuadruple(ItemKey),
    #[error(
        "aligned medoid {0} has an incomplete quadruple and no augmentation client is configured"
    )]
    IncompleteQuadruple(ItemKey),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("invalid pairing config: {0}")]
    InvalidConfig(String),
    #[error("feature dimensions differ between splits ({und} vs {gen})")]
    DimMismatch { und: usize, gen: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Aligned,
    Retrieved,
}

/// Order in which generation items are visited by the greedy matcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GreedyOrder {
    /// Ascending generation id.
    #[default]
    Id,
    /// Descending best similarity against the initial understanding pool,
    /// ties by ascending id.
    MaxSimDesc,
}

impl std::str::FromStr for GreedyOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "id" => Ok(Self::Id),
            "max-sim-desc" => Ok(Self::MaxSimDesc),
            other => Err(format!("unknown greedy order `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairingConfig {
    /// Neighbors retrieved per generation item.
    pub n: usize,
    /// Similarity threshold for retrieved pairs.
    pub delta: f64,
    /// Cluster count; `None` means ceil(5% of all items).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub greedy_order: GreedyOrder,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            n: 1,
            delta: 0.6,
            k: None,
            greedy_order: GreedyOrder::Id,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<(), PairingError> {
        if self.n == 0 {
            return Err(PairingError::InvalidConfig("n must be positive".into()));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(PairingError::InvalidConfig(
                "delta must be finite and nonnegative".into(),
            ));
        }
        if self.k == Some(0) {
            return Err(PairingError::InvalidConfig("k must be positive".into()));
        }
        Ok(())
    }
}

/// One understanding/generation pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UGPair {
    pub und_id: String,
    pub gen_id: String,
    pub kind: PairKind,
    pub similarity: f64,
    pub weight: f64,
}

impl UGPair {
    pub fn aligned(id: &str) -> Self {
        Self {
            und_id: id.to_string(),
            gen_id: id.to_string(),
            kind: PairKind::Aligned,
            similarity: 1.0,
            weight: 1.0,
        }
    }

    pub fn retrieved(und_id: &str, gen_id: &str, similarity: f64) -> Self {
        Self {
            und_id: und_id.to_string(),
            gen_id: gen_id.to_string(),
            kind: PairKind::Retrieved,
            similarity,
            weight: crate::grpo::pair_weight(PairKind::Retrieved, similarity),
        }
    }
}

/// Result of the clustering stage.
#[derive(Debug, Clone)]
pub struct AlignedSelection {
    pub model: ClusterModel,
    /// Medoid keys in cluster order.
    pub medoids: Vec<ItemKey>,
}

/// Clusters the joint feature space and returns one medoid per non-empty
/// cluster.
pub fn build_aligned(
    points: &[FeatureVector],
    clustering: &ClusteringConfig,
) -> Result<AlignedSelection, PairingError> {
    let model = fit_minibatch_kmeans(points, clustering)?;
    aligned_from_model(model, points)
}

/// Medoid selection on an already fitted (possibly deserialized) model.
pub fn aligned_from_model(
    model: ClusterModel,
    points: &[FeatureVector],
) -> Result<AlignedSelection, PairingError> {
    if model.assignments.len() != points.len() {
        return Err(ClusterError::ModelMismatch(format!(
            "model covers {} points, features have {}",
            model.assignments.len(),
            points.len()
        ))
        .into());
    }
    let medoids = select_medoids(&model, points)?;
    Ok(AlignedSelection { model, medoids })
}
