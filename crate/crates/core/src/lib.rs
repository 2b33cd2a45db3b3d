//! Pairing understanding and generation data, and optimizing a shared policy
//! with similarity-weighted group-relative policy optimization.
//!
//! The pipeline runs features → clustering → pairing → rollouts → objective.
//! [`policy::ToyPolicy`] stands in for a unified model at desk scale.

pub mod analysis;
pub mod clustering;
pub mod config;
pub mod features;
pub mod grpo;
pub mod pairing;
pub mod policy;
pub mod rewards;
pub mod seeds;
pub mod synth;
pub mod tasks;
pub mod training;

pub use analysis::{
    gradient_cosine, run_agreement_study, AgreementConfig, AgreementRecord, Regime,
};
pub use clustering::{ClusterModel, ClusteringConfig};
pub use config::{ConfigError, RunConfig};
pub use features::{FeatureSet, FeatureVector, ItemKey, Source};
pub use grpo::{GrpoConfig, ObjectiveReport, PairRollouts, Trajectory};
pub use pairing::{PairKind, PairRecord, PairingConfig, UGPair};
pub use policy::{TokenId, ToyPolicy};
pub use rewards::Side;
pub use training::{Objective, TrainConfig};
