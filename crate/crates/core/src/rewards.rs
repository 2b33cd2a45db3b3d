//! Per-trajectory scalar rewards.
//!
//! Understanding rollouts are scored by exact-match accuracy after light
//! answer normalization. Generation rollouts go through a [`GenerationScorer`]
//! looked up by id in a [`ScorerRegistry`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("unknown generation scorer `{0}`")]
    UnknownScorer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Understanding,
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardNormalization {
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub side: Side,
    pub scorer_id: String,
    pub normalization: RewardNormalization,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            side: Side::Generation,
            scorer_id: TargetOverlap::ID.to_string(),
            normalization: RewardNormalization::None,
        }
    }
}

fn normalize_answer(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// 1.0 when the normalized prediction equals the normalized truth.
/// Normalization trims whitespace, lowercases, and strips trailing
/// punctuation.
pub fn reward_accuracy(pred: &str, truth: &str) -> f64 {
    let truth = normalize_answer(truth);
    if truth.is_empty() {
        return 0.0;
    }
    if normalize_answer(pred) == truth {
        1.0
    } else {
        0.0
    }
}

/// Scores a generated token sequence against a prompt.
pub trait GenerationScorer: Send + Sync {
    /// `prompt` is the reference token sequence the output should realize.
    fn score(&self, prompt: &[TokenId], output: &[TokenId]) -> f64;
}

/// Fraction of target positions reproduced exactly by the output.
#[derive(Debug, Clone, Copy, Default)]
pub struct TargetOverlap;

impl TargetOverlap {
    pub const ID: &'static str = "target-overlap";
}

impl GenerationScorer for TargetOverlap {
    fn score(&self, target: &[TokenId], output: &[TokenId]) -> f64 {
        if target.is_empty() {
            return 0.0;
        }
        let hits = target.iter().zip(output).filter(|(t, o)| t == o).count();
        hits as f64 / target.len() as f64
    }
}

/// Scorers keyed by id. Immutable once built.
pub struct ScorerRegistry {
    scorers: BTreeMap<String, Box<dyn GenerationScorer>>,
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl std::fmt::Debug for ScorerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.scorers.keys()).finish()
    }
}

impl ScorerRegistry {
    pub fn empty() -> Self {
        Self {
            scorers: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        Self::empty().with(TargetOverlap::ID, TargetOverlap)
    }

    pub fn with(mut self, id: &str, scorer: impl GenerationScorer + 'static) -> Self {
        self.scorers.insert(id.to_string(), Box::new(scorer));
        self
    }

    pub fn get(&self, id: &str) -> Result<&dyn GenerationScorer, RewardError> {
        self.scorers
            .get(id)
            .map(|s| s.as_ref())
            .ok_or_else(|| RewardError::UnknownScorer(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.scorers.keys().map(String::as_str)
    }
}

/// Generation reward from the scorer registered under `scorer_id`.
pub fn reward_generation(
    prompt: &[TokenId],
    output: &[TokenId],
    registry: &ScorerRegistry,
    scorer_id: &str,
) -> Result<f64, RewardError> {
    Ok(registry.get(scorer_id)?.score(prompt, output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(reward_accuracy("B", "B"), 1.0);
        assert_eq!(reward_accuracy("  b.", "B"), 1.0);
        assert_eq!(reward_accuracy("A", "B"), 0.0);
        assert_eq!(reward_accuracy("(C)!", "(c)"), 1.0);
        assert_eq!(reward_accuracy("x", "  "), 0.0);
    }

    #[test]
    fn target_overlap_examples() {
        let reg = ScorerRegistry::with_builtins();
        let t = [1, 2, 3, 4, 5];
        assert_eq!(
            reward_generation(&t, &t, &reg, "target-overlap").unwrap(),
            1.0
        );
        assert_eq!(
            reward_generation(&t, &[9, 9, 9, 9, 9], &reg, "target-overlap").unwrap(),
            0.0
        );
        assert_eq!(
            reward_generation(&[1, 2, 3, 4], &[1, 0, 3, 0], &reg, "target-overlap").unwrap(),
            0.5
        );
        assert_eq!(
            reward_generation(&t, &t, &reg, "hpsv2"),
            Err(RewardError::UnknownScorer("hpsv2".into()))
        );
    }

    proptest! {
        #[test]
        fn accuracy_is_symmetric(a in "[ a-cA-C.,!?]{0,5}", b in "[ a-cA-C.,!?]{0,5}") {
            let ab = reward_accuracy(&a, &b);
            let ba = reward_accuracy(&b, &a);
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn overlap_in_unit_interval(
            t in prop::collection::vec(0u32..4, 0..8),
            o in prop::collection::vec(0u32..4, 0..8),
        ) {
            let s = TargetOverlap.score(&t, &o);
            prop_assert!(s.is_finite() && (0.0..=1.0).contains(&s));
            prop_assert_eq!(s, TargetOverlap.score(&t, &o));
        }
    }
}
