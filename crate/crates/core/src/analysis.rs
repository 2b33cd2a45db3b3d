//! Gradient agreement between the understanding and generation objectives,
//! and smoothing of training reward curves.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{
    objective_pair_grpo, objective_pairwise, sgd_step, GrpoConfig, GrpoError, PairRollouts,
};
use crate::policy::{rollout_rng, ToyPolicy};
use crate::rewards::ScorerRegistry;
use crate::seeds::derive_seed;
use crate::tasks::{rollout_pair, Alignment, RolloutError, Sides, SyntheticTaskPair, TaskWorld};

/// Gradient norms below this count as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("gradient shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("malformed training log at line {line}: {message}")]
    MalformedLog { line: usize, message: String },
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// One of the gradients had (near) zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn gradient_cosine(gu: &[f64], gg: &[f64]) -> Result<Cosine, AnalysisError> {
    if gu.len() != gg.len() {
        return Err(AnalysisError::ShapeMismatch(gu.len(), gg.len()));
    }
    let nu = gu.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ng = gg.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < DEGENERATE_NORM || ng < DEGENERATE_NORM {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let dot: f64 = gu.iter().zip(gg).map(|(a, b)| a * b).sum();
    Ok(Cosine {
        value: (dot / (nu * ng)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    AlignedPairs,
    RetrievedPairs,
    RandomPairs,
    Unpaired,
    UnderstandingOnly,
    GenerationOnly,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::AlignedPairs,
        Regime::RetrievedPairs,
        Regime::RandomPairs,
        Regime::Unpaired,
        Regime::UnderstandingOnly,
        Regime::GenerationOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::AlignedPairs => "aligned-pairs",
            Regime::RetrievedPairs => "retrieved-pairs",
            Regime::RandomPairs => "random-pairs",
            Regime::Unpaired => "unpaired",
            Regime::UnderstandingOnly => "understanding-only",
            Regime::GenerationOnly => "generation-only",
        }
    }

    fn sides(self) -> Sides {
        match self {
            Regime::UnderstandingOnly => Sides {
                und: true,
                gen: false,
            },
            Regime::GenerationOnly => Sides {
                und: false,
                gen: true,
            },
            _ => Sides::BOTH,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown regime `{s}`"))
    }
}

/// Population the reported median is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MedianScope {
    /// One batch-level cosine per training step.
    #[default]
    Steps,
    /// One cosine per pair per step.
    Pairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgreementConfig {
    pub steps: usize,
    pub num_pairs: usize,
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub gen_len: usize,
    pub k_und: usize,
    pub k_gen: usize,
    pub lr: f64,
    /// Scale advantages by pair weight; off measures the data effect alone.
    pub sim_weight: bool,
    pub median_scope: MedianScope,
    /// Similarity range for retrieved pairs.
    pub retrieved_sim: [f64; 2],
    /// Similarity range for the unpaired (low-similarity) regime.
    pub unpaired_sim: [f64; 2],
}

impl Default for AgreementConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            num_pairs: 16,
            num_prompts: 32,
            vocab_size: 16,
            gen_len: 6,
            k_und: 4,
            k_gen: 4,
            lr: crate::config::TOY_LR,
            sim_weight: false,
            median_scope: MedianScope::Steps,
            retrieved_sim: [0.6, 0.95],
            unpaired_sim: [0.1, 0.4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRecord {
    pub regime: Regime,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    pub grad_cos: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub median: f64,
    pub records: usize,
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStudy {
    pub seed: u64,
    pub median_scope: MedianScope,
    pub records: Vec<AgreementRecord>,
    pub summary: BTreeMap<Regime, RegimeSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The task pairs a regime trains on.
pub fn regime_tasks(
    regime: Regime,
    world: &TaskWorld,
    cfg: &AgreementConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<SyntheticTaskPair> {
    use rand::Rng;
    (0..cfg.num_pairs)
        .map(|i| {
            let id = format!("{}-{i:03}", regime.name());
            let alignment = match regime {
                Regime::AlignedPairs | Regime::UnderstandingOnly | Regime::GenerationOnly => {
                    Alignment::Aligned
                }
                Regime::RetrievedPairs => {
                    Alignment::Retrieved(rng.gen_range(cfg.retrieved_sim[0]..=cfg.retrieved_sim[1]))
                }
                Regime::Unpaired => {
                    Alignment::Retrieved(rng.gen_range(cfg.unpaired_sim[0]..=cfg.unpaired_sim[1]))
                }
                Regime::RandomPairs => Alignment::Random,
            };
            world.make_pair(id, alignment, rng)
        })
        .collect()
}

fn objective(
    pairs: &[PairRollouts],
    policy: &ToyPolicy,
    grpo: &GrpoConfig,
    sim_weight: bool,
) -> Result<crate::grpo::ObjectiveReport, GrpoError> {
    if sim_weight {
        objective_pair_grpo(pairs, policy, grpo)
    } else {
        objective_pairwise(pairs, policy, grpo)
    }
}

/// Trains a fresh toy policy per regime and records the cosine between the
/// understanding and generation gradients at every step.
pub fn run_agreement_study(
    regimes: &[Regime],
    seed: u64,
    cfg: &AgreementConfig,
    grpo: &GrpoConfig,
) -> Result<AgreementStudy, AnalysisError> {
    let registry = ScorerRegistry::with_builtins();
    let world = TaskWorld::new(
        cfg.num_prompts,
        cfg.vocab_size,
        cfg.gen_len,
        derive_seed(seed, "agreement/world"),
    );
    let grpo = GrpoConfig {
        lr: cfg.lr,
        k_und: cfg.k_und,
        k_gen: cfg.k_gen,
        ..grpo.clone()
    };
    let mut records = Vec::new();
    let mut summary = BTreeMap::new();
    for &regime in regimes {
        let regime_seed = derive_seed(seed, &format!("agreement/{}", regime.name()));
        let mut task_rng = ChaCha8Rng::seed_from_u64(regime_seed);
        let tasks = regime_tasks(regime, &world, cfg, &mut task_rng);
        let mut policy = ToyPolicy::new(cfg.num_prompts, cfg.vocab_size, regime_seed);
        let mut values = Vec::new();
        let mut degenerate = 0;
        for step in 0..cfg.steps {
            let mut rng = rollout_rng(regime_seed, step as u64);
            let rollouts = tasks
                .iter()
                .map(|t| {
                    rollout_pair(
                        &policy,
                        t,
                        cfg.k_und,
                        cfg.k_gen,
                        regime.sides(),
                        &registry,
                        crate::rewards::TargetOverlap::ID,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let report = objective(&rollouts, &policy, &grpo, cfg.sim_weight)?;
            match cfg.median_scope {
                MedianScope::Steps => {
                    let c = gradient_cosine(
                        &report.per_side_grad.understanding,
                        &report.per_side_grad.generation,
                    )?;
                    degenerate += c.degenerate as usize;
                    values.push(c.value);
                    records.push(AgreementRecord {
                        regime,
                        step,
                        pair_id: None,
                        grad_cos: c.value,
                        degenerate: c.degenerate,
                    });
                }
                MedianScope::Pairs => {
                    for r in &rollouts {
                        let single =
                            objective(std::slice::from_ref(r), &policy, &grpo, cfg.sim_weight)?;
                        let c = gradient_cosine(
                            &single.per_side_grad.understanding,
                            &single.per_side_grad.generation,
                        )?;
                        degenerate += c.degenerate as usize;
                        values.push(c.value);
                        records.push(AgreementRecord {
                            regime,
                            step,
                            pair_id: Some(r.pair_id.clone()),
                            grad_cos: c.value,
                            degenerate: c.degenerate,
                        });
                    }
                }
            }
            sgd_step(policy.params_mut(), &report, grpo.lr)?;
        }
        summary.insert(
            regime,
            RegimeSummary {
                median: median(&values),
                records: values.len(),
                degenerate,
            },
        );
    }
    Ok(AgreementStudy {
        seed,
        median_scope: cfg.median_scope,
        records,
        summary,
    })
}

/// Agreement records as CSV: `regime,step,grad_cos,flag,pair_id`.
pub fn agreement_csv(study: &AgreementStudy) -> String {
    let mut out = String::from("regime,step,grad_cos,flag,pair_id\n");
    for r in &study.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.regime,
            r.step,
            r.grad_cos,
            if r.degenerate { "degenerate" } else { "" },
            r.pair_id.as_deref().unwrap_or("")
        ));
    }
    out
}

/// Smoothing factor of the reward curves.
pub const EMA_SMOOTHING: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedPoint {
    pub step: usize,
    pub reward_und: f64,
    pub reward_gen: f64,
}

/// Exponential moving average (`ema = 0.9 * ema + 0.1 * x`, seeded with the
/// first value) of the per-side mean rewards in a training log.
pub fn summarize_rewards(log_csv: &str) -> Result<Vec<SmoothedPoint>, AnalysisError> {
    let mut reader = csv::Reader::from_reader(log_csv.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| AnalysisError::MalformedLog {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AnalysisError::MalformedLog {
                line: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let (c_step, c_und, c_gen) = (
        col("step")?,
        col("mean_reward_und")?,
        col("mean_reward_gen")?,
    );
    let mut out: Vec<SmoothedPoint> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| AnalysisError::MalformedLog {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str, AnalysisError> {
            rec.get(c).ok_or_else(|| AnalysisError::MalformedLog {
                line,
                message: "short row".into(),
            })
        };
        let num = |c: usize| -> Result<f64, AnalysisError> {
            field(c)?
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| AnalysisError::MalformedLog {
                    line,
                    message: format!("bad number in column {c}"),
                })
        };
        let step = field(c_step)?
            .parse::<usize>()
            .map_err(|e| AnalysisError::MalformedLog {
                line,
                message: e.to_string(),
            })?;
        let (u, g) = (num(c_und)?, num(c_gen)?);
        let point = match out.last() {
            None => SmoothedPoint {
                step,
                reward_und: u,
                reward_gen: g,
            },
            Some(prev) => SmoothedPoint {
                step,
                reward_und: EMA_SMOOTHING * prev.reward_und + (1.0 - EMA_SMOOTHING) * u,
                reward_gen: EMA_SMOOTHING * prev.reward_gen + (1.0 - EMA_SMOOTHING) * g,
            },
        };
        out.push(point);
    }
    Ok(out)
}

pub fn smoothed_csv(points: &[SmoothedPoint]) -> String {
    let mut out = String::from("step,reward_und_ema,reward_gen_ema\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.step, p.reward_und, p.reward_gen));
    }
    out
}
