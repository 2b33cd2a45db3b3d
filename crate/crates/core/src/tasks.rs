//! Desk-scale stand-ins for paired understanding/generation data.
//!
//! Every policy row has a "content" token. An understanding task asks for that
//! token as its single-token answer; a generation task asks for a fixed-length
//! target sequence. How the generation target relates to the understanding
//! answer is what distinguishes aligned, retrieved and random pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grpo::{pair_weight, PairRollouts, Trajectory};
use crate::pairing::{PairKind, PairRecord};
use crate::policy::{PolicyError, TokenId, ToyPolicy};
use crate::rewards::{reward_accuracy, reward_generation, RewardError, ScorerRegistry, Side};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Alignment {
    /// Same row, generation target is the content token at every position.
    Aligned,
    /// Same row, each target position is the content token with probability
    /// equal to the similarity, otherwise a uniform token.
    Retrieved(f64),
    /// Independent rows and an independent uniform target.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskPair {
    pub pair_id: String,
    pub prompt_u: usize,
    pub prompt_g: usize,
    pub answer_token: TokenId,
    pub target_seq: Vec<TokenId>,
    pub alignment: Alignment,
    pub kind: PairKind,
    pub similarity: f64,
    pub weight: f64,
}

/// Shape of the toy problem plus the per-row content tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskWorld {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub gen_len: usize,
    content: Vec<TokenId>,
}

impl TaskWorld {
    pub fn new(num_prompts: usize, vocab_size: usize, gen_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content = (0..num_prompts)
            .map(|_| rng.gen_range(0..vocab_size) as TokenId)
            .collect();
        Self {
            num_prompts,
            vocab_size,
            gen_len,
            content,
        }
    }

    pub fn content_token(&self, row: usize) -> TokenId {
        self.content[row]
    }

    /// Builds one task pair. `rng` supplies rows and target noise.
    pub fn make_pair(
        &self,
        pair_id: impl Into<String>,
        alignment: Alignment,
        rng: &mut impl Rng,
    ) -> SyntheticTaskPair {
        let row = rng.gen_range(0..self.num_prompts);
        self.make_pair_on_row(pair_id, alignment, row, rng)
    }

    pub fn make_pair_on_row(
        &self,
        pair_id: impl Into<String>,
        alignment: Alignment,
        row: usize,
        rng: &mut impl Rng,
    ) -> SyntheticTaskPair {
        let answer = self.content[row];
        let uniform = |rng: &mut dyn rand::RngCore| rng.gen_range(0..self.vocab_size) as TokenId;
        let (prompt_g, target_seq, kind, similarity) = match alignment {
            Alignment::Aligned => (row, vec![answer; self.gen_len], PairKind::Aligned, 1.0),
            Alignment::Retrieved(s) => {
                let seq = (0..self.gen_len)
                    .map(|_| {
                        if rng.gen::<f64>() < s {
                            answer
                        } else {
                            uniform(rng)
                        }
                    })
                    .collect();
                (row, seq, PairKind::Retrieved, s)
            }
            Alignment::Random => {
                let other = rng.gen_range(0..self.num_prompts);
                let seq = (0..self.gen_len).map(|_| uniform(rng)).collect();
                (other, seq, PairKind::Retrieved, 0.0)
            }
        };
        SyntheticTaskPair {
            pair_id: pair_id.into(),
            prompt_u: row,
            prompt_g,
            answer_token: answer,
            target_seq,
            alignment,
            kind,
            similarity,
            weight: pair_weight(kind, similarity),
        }
    }

    /// Maps dataset records onto toy tasks: aligned records become
    /// [`Alignment::Aligned`], retrieved ones [`Alignment::Retrieved`] with
    /// their similarity. Rows are drawn from `seed` in record order.
    pub fn tasks_from_records(&self, records: &[PairRecord], seed: u64) -> Vec<SyntheticTaskPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        records
            .iter()
            .map(|r| {
                let alignment = match r.kind {
                    PairKind::Aligned => Alignment::Aligned,
                    PairKind::Retrieved => Alignment::Retrieved(r.similarity),
                };
                let mut t = self.make_pair(r.pair_id.clone(), alignment, &mut rng);
                t.weight = r.weight;
                t
            })
            .collect()
    }
}

/// Which sides of a pair produce rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sides {
    pub und: bool,
    pub gen: bool,
}

impl Sides {
    pub const BOTH: Sides = Sides {
        und: true,
        gen: true,
    };
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Samples and scores `k_und` understanding and `k_gen` generation rollouts
/// for one task pair.
#[allow(clippy::too_many_arguments)]
pub fn rollout_pair(
    policy: &ToyPolicy,
    task: &SyntheticTaskPair,
    k_und: usize,
    k_gen: usize,
    sides: Sides,
    registry: &ScorerRegistry,
    scorer_id: &str,
    rng: &mut impl Rng,
) -> Result<PairRollouts, RolloutError> {
    registry.get(scorer_id)?;
    let mut und = Vec::new();
    let mut gen = Vec::new();
    if sides.und {
        let prompt_id = format!("{}/und", task.pair_id);
        let truth = task.answer_token.to_string();
        for _ in 0..k_und {
            let mut t: Trajectory =
                policy.sample_trajectory(&prompt_id, task.prompt_u, Side::Understanding, 1, rng)?;
            t.reward = reward_accuracy(&t.tokens[0].to_string(), &truth);
            t.pair = Some(task.pair_id.clone());
            und.push(t);
        }
    }
    if sides.gen {
        let prompt_id = format!("{}/gen", task.pair_id);
        for _ in 0..k_gen {
            let mut t = policy.sample_trajectory(
                &prompt_id,
                task.prompt_g,
                Side::Generation,
                task.target_seq.len(),
                rng,
            )?;
            t.reward = reward_generation(&task.target_seq, &t.tokens, registry, scorer_id)?;
            t.pair = Some(task.pair_id.clone());
            gen.push(t);
        }
    }
    Ok(PairRollouts {
        pair_id: task.pair_id.clone(),
        kind: task.kind,
        similarity: task.similarity,
        weight: task.weight,
        und,
        gen,
    })
}
