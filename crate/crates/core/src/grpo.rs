//! Group-relative policy optimization objectives.
//!
//! All three objectives share one evaluator: every trajectory carries a
//! scalar advantage (already scaled by its pair weight where applicable),
//! broadcast to each of its tokens. For token `t` with ratio
//! `rho = exp(new - old)` the per-token term is
//!
//! ```text
//! min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) - beta * k3(old - new)
//! ```
//!
//! with `k3(d) = exp(d) - d - 1`, and the objective is the sum over all tokens
//! divided by the total token count of the batch.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairing::PairKind;
use crate::policy::{PolicyError, TokenId, TokenPolicy};
use crate::rewards::Side;

/// Log-ratio exponents are clamped to this magnitude before `exp`.
pub const RATIO_EXP_CLAMP: f64 = 20.0;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid trajectory `{prompt_id}`: {reason}")]
    InvalidTrajectory { prompt_id: String, reason: String },
    #[error("policy cannot score trajectory: {0}")]
    PolicyMismatch(#[from] PolicyError),
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("invalid grpo config: {0}")]
    InvalidConfig(String),
}

/// One sampled rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Grouping key `q`.
    pub prompt_id: String,
    /// Policy row the rollout was conditioned on.
    pub context: usize,
    pub side: Side,
    pub tokens: Vec<TokenId>,
    /// `log pi_old` per token, recorded at sampling time.
    pub old_logps: Vec<f64>,
    pub reward: f64,
    pub pair: Option<String>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let fail = |reason: &str| GrpoError::InvalidTrajectory {
            prompt_id: self.prompt_id.clone(),
            reason: reason.to_string(),
        };
        if self.tokens.is_empty() {
            return Err(fail("no tokens"));
        }
        if self.tokens.len() != self.old_logps.len() {
            return Err(fail("tokens and old_logps differ in length"));
        }
        if self.old_logps.iter().any(|x| !x.is_finite()) {
            return Err(fail("non-finite old log-probability"));
        }
        if !self.reward.is_finite() {
            return Err(fail("non-finite reward"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlEstimator {
    #[default]
    K3,
}

/// Where pairwise objectives normalize rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupScope {
    /// Within each pair's rollouts for one side.
    #[default]
    Pair,
    /// Across the batch, keyed by `(prompt_id, side)`.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub clip_eps: f64,
    pub beta: f64,
    pub k_und: usize,
    pub k_gen: usize,
    pub sigma_min: f64,
    pub lr: f64,
    pub kl_estimator: KlEstimator,
    pub group_scope: GroupScope,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            beta: 0.0,
            k_und: 4,
            k_gen: 4,
            sigma_min: 1e-8,
            lr: 1e-6,
            kl_estimator: KlEstimator::K3,
            group_scope: GroupScope::Pair,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite nonnegative number");
        }
        if self.k_und == 0 || self.k_gen == 0 {
            return bad("rollout group sizes must be positive");
        }
        if self.sigma_min.is_nan() || self.sigma_min < 0.0 {
            return bad("sigma_min must be nonnegative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

/// Rollouts sharing `(prompt_id, side)` and their normalized advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_id: String,
    pub side: Side,
    /// Indices into the batch.
    pub members: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// Mean, population std and `(r - mean) / std`. All advantages are zero
/// when `std < sigma_min`.
pub fn normalize_rewards(rewards: &[f64], sigma_min: f64) -> (f64, f64, Vec<f64>) {
    if rewards.is_empty() {
        return (0.0, 0.0, Vec::new());
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let adv = if std < sigma_min || std == 0.0 {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    (mean, std, adv)
}

/// Partitions the batch by `(prompt_id, side)` in order of first appearance.
pub fn group_trajectories(batch: &[Trajectory], sigma_min: f64) -> Vec<Group> {
    let mut index: HashMap<(&str, Side), usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    for (i, t) in batch.iter().enumerate() {
        let g = *index
            .entry((t.prompt_id.as_str(), t.side))
            .or_insert_with(|| {
                groups.push(Group {
                    prompt_id: t.prompt_id.clone(),
                    side: t.side,
                    members: Vec::new(),
                    mean: 0.0,
                    std: 0.0,
                    advantages: Vec::new(),
                });
                groups.len() - 1
            });
        groups[g].members.push(i);
    }
    for g in &mut groups {
        let rewards: Vec<f64> = g.members.iter().map(|&i| batch[i].reward).collect();
        let (mean, std, adv) = normalize_rewards(&rewards, sigma_min);
        g.mean = mean;
        g.std = std;
        g.advantages = adv;
    }
    groups
}

/// `exp(new - old)` with the exponent clamped to ±20.
pub fn importance_ratio(new_logp: f64, old_logp: f64) -> f64 {
    (new_logp - old_logp)
        .clamp(-RATIO_EXP_CLAMP, RATIO_EXP_CLAMP)
        .exp()
}

pub fn clipped_surrogate(rho: f64, adv: f64, eps: f64) -> f64 {
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * adv;
    unclipped.min(clipped)
}

/// Per-token k3 estimate `exp(d) - d - 1`, `d = old - new`.
pub fn k3(new_logp: f64, old_logp: f64) -> f64 {
    let d = old_logp - new_logp;
    // exp_m1 keeps tiny differences from cancelling to a negative value
    (d.exp_m1() - d).max(0.0)
}

/// Mean k3 estimate over tokens.
pub fn kl_penalty(new_logps: &[f64], old_logps: &[f64]) -> f64 {
    assert_eq!(new_logps.len(), old_logps.len(), "log-prob lengths differ");
    if new_logps.is_empty() {
        return 0.0;
    }
    new_logps
        .iter()
        .zip(old_logps)
        .map(|(n, o)| k3(*n, *o))
        .sum::<f64>()
        / new_logps.len() as f64
}

/// Advantage multiplier: 1 for aligned pairs, `sqrt(s)` for retrieved ones.
pub fn pair_weight(kind: PairKind, similarity: f64) -> f64 {
    match kind {
        PairKind::Aligned => 1.0,
        PairKind::Retrieved => similarity.clamp(0.0, 1.0).sqrt(),
    }
}

/// Per-side split of a gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideGrads {
    pub understanding: Vec<f64>,
    pub generation: Vec<f64>,
}

impl SideGrads {
    pub fn get(&self, side: Side) -> &[f64] {
        match side {
            Side::Understanding => &self.understanding,
            Side::Generation => &self.generation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub value: f64,
    pub grad: Vec<f64>,
    pub per_side_grad: SideGrads,
    /// Contribution of each side to `value`, `[understanding, generation]`;
    /// they sum to it up to rounding.
    pub per_side_value: [f64; 2],
    pub clip_fraction: f64,
    pub kl: f64,
    pub tokens: usize,
}

/// Evaluates the objective for trajectories with given advantages.
fn evaluate<P: TokenPolicy>(
    items: &[(&Trajectory, f64)],
    policy: &P,
    cfg: &GrpoConfig,
) -> Result<ObjectiveReport, GrpoError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    for (t, _) in items {
        t.validate()?;
    }
    let total_tokens: usize = items.iter().map(|(t, _)| t.tokens.len()).sum();
    let norm = 1.0 / total_tokens as f64;
    let np = policy.num_params();
    let mut grad_u = vec![0.0; np];
    let mut grad_g = vec![0.0; np];
    let mut surr_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut side_sum = [0.0; 2];
    let mut clipped = 0usize;
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);

    for (traj, adv) in items {
        let (out, slot) = match traj.side {
            Side::Understanding => (&mut grad_u, 0),
            Side::Generation => (&mut grad_g, 1),
        };
        for (&tok, &old) in traj.tokens.iter().zip(&traj.old_logps) {
            let new = policy.log_prob(traj.context, tok)?;
            let log_ratio = new - old;
            let rho = importance_ratio(new, old);
            let unclipped = rho * adv;
            let clipped_term = rho.clamp(lo, hi) * adv;
            let surr = unclipped.min(clipped_term);
            let token_kl = k3(new, old);
            surr_sum += surr;
            kl_sum += token_kl;
            side_sum[slot] += surr - cfg.beta * token_kl;

            let mut coeff = 0.0;
            if clipped_term < unclipped {
                clipped += 1;
            } else if log_ratio.abs() < RATIO_EXP_CLAMP {
                coeff += adv * rho;
            }
            if cfg.beta > 0.0 {
                // d k3 / d new = 1 - exp(old - new)
                coeff -= cfg.beta * (-(old - new).exp_m1());
            }
            if coeff != 0.0 {
                policy.add_grad_log_prob(traj.context, tok, coeff * norm, out)?;
            }
        }
    }

    let kl = kl_sum * norm;
    let value = surr_sum * norm - cfg.beta * kl;
    let grad: Vec<f64> = grad_u.iter().zip(&grad_g).map(|(u, g)| u + g).collect();
    Ok(ObjectiveReport {
        value,
        grad,
        per_side_grad: SideGrads {
            understanding: grad_u,
            generation: grad_g,
        },
        per_side_value: [side_sum[0] * norm, side_sum[1] * norm],
        clip_fraction: clipped as f64 / total_tokens as f64,
        kl,
        tokens: total_tokens,
    })
}

/// Vanilla mixed-task objective: advantages normalized within
/// `(prompt_id, side)` groups of the batch.
pub fn objective_vanilla<P: TokenPolicy>(
    batch: &[Trajectory],
    policy: &P,
    cfg: &GrpoConfig,
) -> Result<ObjectiveReport, GrpoError> {
    let mut adv = vec![0.0; batch.len()];
    for g in group_trajectories(batch, cfg.sigma_min) {
        for (&i, a) in g.members.iter().zip(&g.advantages) {
            adv[i] = *a;
        }
    }
    let items: Vec<(&Trajectory, f64)> = batch.iter().zip(adv).collect();
    evaluate(&items, policy, cfg)
}

/// Rollouts drawn for one understanding/generation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRollouts {
    pub pair_id: String,
    pub kind: PairKind,
    pub similarity: f64,
    pub weight: f64,
    pub und: Vec<Trajectory>,
    pub gen: Vec<Trajectory>,
}

impl PairRollouts {
    /// Understanding rollouts followed by generation rollouts.
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.und.iter().chain(&self.gen)
    }
}

/// Flattens pairs into one batch in the order the pairwise objectives use.
pub fn merge_pairs(pairs: &[PairRollouts]) -> Vec<Trajectory> {
    pairs
        .iter()
        .flat_map(|p| p.trajectories().cloned())
        .collect()
}

fn pair_advantages(pairs: &[PairRollouts], cfg: &GrpoConfig) -> Vec<Vec<f64>> {
    match cfg.group_scope {
        GroupScope::Pair => pairs
            .iter()
            .map(|p| {
                let ru: Vec<f64> = p.und.iter().map(|t| t.reward).collect();
                let rg: Vec<f64> = p.gen.iter().map(|t| t.reward).collect();
                let mut a = normalize_rewards(&ru, cfg.sigma_min).2;
                a.extend(normalize_rewards(&rg, cfg.sigma_min).2);
                a
            })
            .collect(),
        GroupScope::Batch => {
            let flat = merge_pairs(pairs);
            let mut adv = vec![0.0; flat.len()];
            for g in group_trajectories(&flat, cfg.sigma_min) {
                for (&i, a) in g.members.iter().zip(&g.advantages) {
                    adv[i] = *a;
                }
            }
            let mut it = adv.into_iter();
            pairs
                .iter()
                .map(|p| it.by_ref().take(p.und.len() + p.gen.len()).collect())
                .collect()
        }
    }
}

fn objective_weighted<P: TokenPolicy>(
    pairs: &[PairRollouts],
    policy: &P,
    cfg: &GrpoConfig,
    weight: impl Fn(&PairRollouts) -> f64,
) -> Result<ObjectiveReport, GrpoError> {
    let advs = pair_advantages(pairs, cfg);
    let mut items = Vec::new();
    for (p, a) in pairs.iter().zip(&advs) {
        let w = weight(p);
        items.extend(p.trajectories().zip(a).map(|(t, a)| (t, w * a)));
    }
    evaluate(&items, policy, cfg)
}

/// Pairwise objective: every pair contributes both sides at full weight.
pub fn objective_pairwise<P: TokenPolicy>(
    pairs: &[PairRollouts],
    policy: &P,
    cfg: &GrpoConfig,
) -> Result<ObjectiveReport, GrpoError> {
    objective_weighted(pairs, policy, cfg, |_| 1.0)
}

/// Pairwise objective with each pair's advantages scaled by its weight.
pub fn objective_pair_grpo<P: TokenPolicy>(
    pairs: &[PairRollouts],
    policy: &P,
    cfg: &GrpoConfig,
) -> Result<ObjectiveReport, GrpoError> {
    objective_weighted(pairs, policy, cfg, |p| p.weight)
}

/// Gradient ascent: `theta += lr * grad`.
pub fn sgd_step(params: &mut [f64], report: &ObjectiveReport, lr: f64) -> Result<(), GrpoError> {
    if report.grad.len() != params.len() {
        return Err(GrpoError::InvalidConfig(format!(
            "gradient has {} entries, policy has {}",
            report.grad.len(),
            params.len()
        )));
    }
    if report.grad.iter().any(|g| !g.is_finite()) {
        return Err(GrpoError::NonFiniteGradient);
    }
    for (p, g) in params.iter_mut().zip(&report.grad) {
        *p += lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ToyPolicy;
    use proptest::prelude::*;

    fn traj(prompt: &str, side: Side, reward: f64) -> Trajectory {
        Trajectory {
            prompt_id: prompt.into(),
            context: 0,
            side,
            tokens: vec![0],
            old_logps: vec![(0.5f64).ln()],
            reward,
            pair: None,
        }
    }

    fn advantages_of(rewards: &[f64]) -> Vec<f64> {
        let batch: Vec<Trajectory> = rewards
            .iter()
            .map(|&r| traj("q", Side::Understanding, r))
            .collect();
        group_trajectories(&batch, 1e-8).remove(0).advantages
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(
            advantages_of(&[1.0, 0.0, 1.0, 0.0]),
            vec![1.0, -1.0, 1.0, -1.0]
        );
        assert_eq!(advantages_of(&[0.7, 0.7, 0.7]), vec![0.0, 0.0, 0.0]);
        assert_eq!(advantages_of(&[2.0, 0.0]), vec![1.0, -1.0]);
    }

    #[test]
    fn groups_split_by_prompt_and_side() {
        let batch = vec![
            traj("a", Side::Understanding, 1.0),
            traj("a", Side::Generation, 0.0),
            traj("b", Side::Understanding, 0.0),
            traj("a", Side::Understanding, 0.0),
        ];
        let groups = group_trajectories(&batch, 1e-8);
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[0].members, vec![0, 3]);
        assert_eq!(groups[0].mean, 0.5);
        assert_eq!(groups[1].advantages, vec![0.0]);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratio(-1.0, -1.0), 1.0);
        assert!((importance_ratio(-1.0, -1.0 - 2f64.ln()) - 2.0).abs() < 1e-12);
        assert_eq!(importance_ratio(-50.0, 0.0), (-20.0f64).exp());
        assert_eq!(importance_ratio(50.0, 0.0), 20.0f64.exp());
    }

    #[test]
    fn surrogate_examples() {
        assert!((clipped_surrogate(1.5, 2.0, 0.2) - 2.4).abs() < 1e-12);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        for adv in [-3.0, 0.0, 0.25, 7.0] {
            assert_eq!(clipped_surrogate(1.0, adv, 0.1), adv);
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_penalty(&[-1.0, -2.0], &[-1.0, -2.0]), 0.0);
        let l2 = 2f64.ln();
        let v = kl_penalty(&[-1.0 - l2, -3.0 - l2], &[-1.0, -3.0]);
        assert!((v - (1.0 - l2)).abs() < 1e-12);
        let v = kl_penalty(&[-1.0 + l2], &[-1.0]);
        assert!((v - (l2 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn weight_examples() {
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(pair_weight(PairKind::Aligned, s), 1.0);
        }
        assert!((pair_weight(PairKind::Retrieved, 0.64) - 0.8).abs() < 1e-15);
        assert_eq!(pair_weight(PairKind::Retrieved, 1.0), 1.0);
    }

    #[test]
    fn identical_rewards_give_zero_objective_and_gradient() {
        let policy = ToyPolicy::random(2, 4, 3, 1.0);
        let mk = |side, ctx, tok: u32, r| Trajectory {
            prompt_id: format!("{side:?}"),
            context: ctx,
            side,
            tokens: vec![tok],
            old_logps: vec![policy.log_prob(ctx, tok).unwrap()],
            reward: r,
            pair: Some("p".into()),
        };
        let pair = PairRollouts {
            pair_id: "p".into(),
            kind: PairKind::Retrieved,
            similarity: 0.81,
            weight: 0.9,
            und: vec![
                mk(Side::Understanding, 0, 1, 0.3),
                mk(Side::Understanding, 0, 2, 0.3),
            ],
            gen: vec![
                mk(Side::Generation, 1, 0, 0.9),
                mk(Side::Generation, 1, 3, 0.9),
            ],
        };
        let r = objective_pair_grpo(&[pair], &policy, &GrpoConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut params = vec![0.0; 2];
        let mut report = ObjectiveReport {
            value: 0.0,
            grad: vec![1.0, 2.0],
            per_side_grad: SideGrads {
                understanding: vec![1.0, 2.0],
                generation: vec![0.0, 0.0],
            },
            per_side_value: [0.0; 2],
            clip_fraction: 0.0,
            kl: 0.0,
            tokens: 1,
        };
        sgd_step(&mut params, &report, 0.5).unwrap();
        assert_eq!(params, vec![0.5, 1.0]);
        report.grad[1] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut params, &report, 0.5),
            Err(GrpoError::NonFiniteGradient)
        ));
    }

    #[test]
    fn invalid_inputs() {
        let policy = ToyPolicy::new(1, 2, 0);
        let cfg = GrpoConfig::default();
        assert!(matches!(
            objective_vanilla(&[], &policy, &cfg),
            Err(GrpoError::EmptyBatch)
        ));
        let mut t = traj("q", Side::Understanding, 1.0);
        t.tokens = vec![5];
        assert!(matches!(
            objective_vanilla(&[t.clone()], &policy, &cfg),
            Err(GrpoError::PolicyMismatch(_))
        ));
        t.old_logps.push(0.0);
        assert!(matches!(
            objective_vanilla(&[t], &policy, &cfg),
            Err(GrpoError::InvalidTrajectory { .. })
        ));
        let bad = GrpoConfig {
            clip_eps: 1.5,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn affine_reward_invariance(
            rewards in prop::collection::vec(-5.0f64..5.0, 2..8),
            c in 0.1f64..10.0,
            d in -10.0f64..10.0,
        ) {
            let (_, std, a) = normalize_rewards(&rewards, 1e-8);
            prop_assume!(std > 1e-6);
            let shifted: Vec<f64> = rewards.iter().map(|r| c * r + d).collect();
            let (_, _, b) = normalize_rewards(&shifted, 1e-8);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn surrogate_is_min_of_branches(
            rho in 0.0f64..5.0,
            adv in -5.0f64..5.0,
            eps in 0.01f64..0.99,
        ) {
            let s = clipped_surrogate(rho, adv, eps);
            prop_assert!(s <= rho * adv);
            prop_assert!(s <= rho.clamp(1.0 - eps, 1.0 + eps) * adv);
        }

        #[test]
        fn kl_nonnegative(new in prop::collection::vec(-10.0f64..0.0, 1..6), shift in -3.0f64..3.0) {
            let old: Vec<f64> = new.iter().map(|x| x + shift).collect();
            let v = kl_penalty(&new, &old);
            prop_assert!(v >= 0.0);
            if shift == 0.0 {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
