//! Toy training runs: pair records drive synthetic tasks, a shared softmax
//! policy is optimized with the selected objective, and every step is logged.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{gradient_cosine, AnalysisError};
use crate::config::RunConfig;
use crate::grpo::{
    merge_pairs, objective_pair_grpo, objective_pairwise, objective_vanilla, sgd_step, GrpoError,
    ObjectiveReport, PairRollouts,
};
use crate::pairing::PairRecord;
use crate::policy::{rollout_rng, ToyPolicy};
use crate::rewards::ScorerRegistry;
use crate::tasks::{rollout_pair, RolloutError, Sides, TaskWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Vanilla,
    Pairwise,
    #[default]
    PairGrpo,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Vanilla => "vanilla",
            Objective::Pairwise => "pairwise",
            Objective::PairGrpo => "pair-grpo",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Objective::Vanilla, Objective::Pairwise, Objective::PairGrpo]
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown objective `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// `false` forces every pair weight to 1.
    pub sim_weight: bool,
    pub batch_pairs: usize,
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub gen_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::PairGrpo,
            sim_weight: true,
            batch_pairs: 16,
            num_prompts: 32,
            vocab_size: 16,
            gen_len: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_pairs == 0
            || self.num_prompts == 0
            || self.vocab_size == 0
            || self.gen_len == 0
        {
            return Err("train sizes must be at least 1".into());
        }
        if !self.sim_weight && self.objective == Objective::Vanilla {
            return Err(
                "disabling similarity weights has no meaning for the vanilla objective".into(),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no pairs to train on")]
    EmptyDataset,
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(rename = "J")]
    pub objective: f64,
    pub mean_reward_und: f64,
    pub mean_reward_gen: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub grad_cos: f64,
}

impl StepLog {
    pub fn combined_reward(&self) -> f64 {
        0.5 * (self.mean_reward_und + self.mean_reward_gen)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub policy: ToyPolicy,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates the configured objective on one batch of rollouts.
pub fn evaluate_objective(
    objective: Objective,
    pairs: &[PairRollouts],
    policy: &ToyPolicy,
    cfg: &crate::grpo::GrpoConfig,
) -> Result<ObjectiveReport, GrpoError> {
    match objective {
        Objective::Vanilla => objective_vanilla(&merge_pairs(pairs), policy, cfg),
        Objective::Pairwise => objective_pairwise(pairs, policy, cfg),
        Objective::PairGrpo => objective_pair_grpo(pairs, policy, cfg),
    }
}

/// Runs `cfg.steps` updates on a fresh zero-initialized toy policy.
pub fn run_training(records: &[PairRecord], cfg: &RunConfig) -> Result<TrainOutcome, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let t = &cfg.train;
    let world = TaskWorld::new(
        t.num_prompts,
        t.vocab_size,
        t.gen_len,
        cfg.subsystem_seed("train/world"),
    );
    let mut tasks = world.tasks_from_records(records, cfg.subsystem_seed("train/tasks"));
    if !t.sim_weight {
        for task in &mut tasks {
            task.weight = 1.0;
        }
    }
    let registry = ScorerRegistry::with_builtins();
    let batch_seed = cfg.subsystem_seed("train/batch");
    let rollout_seed = cfg.subsystem_seed("train/rollout");
    let mut policy = ToyPolicy::new(
        t.num_prompts,
        t.vocab_size,
        cfg.subsystem_seed("train/policy"),
    );
    let batch = t.batch_pairs.min(tasks.len());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut brng = rollout_rng(batch_seed, step as u64);
        let mut picked = sample(&mut brng, tasks.len(), batch).into_vec();
        picked.sort_unstable();
        let mut rrng = rollout_rng(rollout_seed, step as u64);
        let rollouts = picked
            .iter()
            .map(|&i| {
                rollout_pair(
                    &policy,
                    &tasks[i],
                    cfg.grpo.k_und,
                    cfg.grpo.k_gen,
                    Sides::BOTH,
                    &registry,
                    &cfg.reward.gen.scorer,
                    &mut rrng,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let report = evaluate_objective(t.objective, &rollouts, &policy, &cfg.grpo)?;
        let cos = gradient_cosine(
            &report.per_side_grad.understanding,
            &report.per_side_grad.generation,
        )?;
        log.push(StepLog {
            step,
            objective: report.value,
            mean_reward_und: mean(rollouts.iter().flat_map(|r| r.und.iter().map(|x| x.reward))),
            mean_reward_gen: mean(rollouts.iter().flat_map(|r| r.gen.iter().map(|x| x.reward))),
            clip_fraction: report.clip_fraction,
            kl: report.kl,
            grad_cos: cos.value,
        });
        sgd_step(policy.params_mut(), &report, cfg.grpo.lr)?;
    }
    Ok(TrainOutcome { log, policy })
}

pub fn log_csv(log: &[StepLog]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Mean combined reward over the last tenth of steps minus the first tenth.
pub fn reward_gain(log: &[StepLog]) -> f64 {
    let n = (log.len() / 10).max(1);
    let head = mean(log.iter().take(n).map(StepLog::combined_reward));
    let tail = mean(log.iter().rev().take(n).map(StepLog::combined_reward));
    tail - head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::{build_pair_dataset, PairingConfig};
    use crate::synth::{generate, SynthConfig};

    fn records() -> Vec<PairRecord> {
        let corpus = generate(&SynthConfig::default(), 1).unwrap();
        let cfg = RunConfig::default();
        build_pair_dataset(
            &corpus.und,
            &corpus.gen,
            &corpus.index(),
            &PairingConfig::default(),
            &cfg.clustering_config(),
            None,
            None,
        )
        .unwrap()
        .records
    }

    #[test]
    fn objective_names_parse() {
        for o in [Objective::Vanilla, Objective::Pairwise, Objective::PairGrpo] {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
        assert!("ppo".parse::<Objective>().is_err());
    }

    #[test]
    fn vanilla_without_weights_is_rejected() {
        let t = TrainConfig {
            objective: Objective::Vanilla,
            sim_weight: false,
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn short_run_is_deterministic_and_logged() {
        let recs = records();
        let cfg = RunConfig {
            steps: 5,
            ..Default::default()
        };
        let a = run_training(&recs, &cfg).unwrap();
        let b = run_training(&recs, &cfg).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.policy.params(), b.policy.params());
        let csv = log_csv(&a.log);
        assert!(
            csv.starts_with("step,J,mean_reward_und,mean_reward_gen,clip_fraction,kl,grad_cos\n")
        );
        assert_eq!(csv.lines().count(), 6);
        assert!(matches!(
            run_training(&[], &cfg),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn reward_gain_compares_tenths() {
        let log: Vec<StepLog> = (0..20)
            .map(|i| StepLog {
                step: i,
                objective: 0.0,
                mean_reward_und: i as f64 / 20.0,
                mean_reward_gen: i as f64 / 20.0,
                clip_fraction: 0.0,
                kl: 0.0,
                grad_cos: 0.0,
            })
            .collect();
        assert!((reward_gain(&log) - 0.9).abs() < 1e-12);
    }
}
