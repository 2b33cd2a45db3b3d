//! A memoryless softmax token policy with one shared parameter table.
//!
//! Each prompt row `p` holds `V` logits; `pi(token | p) = softmax(logits[p])`.
//! Understanding and generation rollouts index the same table, which is the
//! only coupling between the two tasks. Tokens within a rollout are drawn
//! i.i.d. from the row distribution.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::Trajectory;
use crate::rewards::Side;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("prompt {prompt} / token {token} out of range for {num_prompts}x{vocab_size} policy")]
    IndexOutOfRange {
        prompt: usize,
        token: TokenId,
        num_prompts: usize,
        vocab_size: usize,
    },
    #[error("checkpoint shape {rows}x{cols} does not match {len} logits")]
    BadCheckpoint {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What the objectives need from a policy: log-probabilities and their
/// gradients with respect to a flat parameter vector.
pub trait TokenPolicy {
    fn num_params(&self) -> usize;

    fn log_prob(&self, context: usize, token: TokenId) -> Result<f64, PolicyError>;

    /// Adds `scale * d log pi(token | context) / d theta` into `out`.
    fn add_grad_log_prob(
        &self,
        context: usize,
        token: TokenId,
        scale: f64,
        out: &mut [f64],
    ) -> Result<(), PolicyError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Row-major `num_prompts x vocab_size`.
    pub logits: Vec<f64>,
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl ToyPolicy {
    /// Uniform policy (all logits zero).
    pub fn new(num_prompts: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            num_prompts,
            vocab_size,
            seed,
            logits: vec![0.0; num_prompts * vocab_size],
        }
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(num_prompts: usize, vocab_size: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..num_prompts * vocab_size)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Self {
            num_prompts,
            vocab_size,
            seed,
            logits,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Same shape and seed with different parameters.
    pub fn with_params(&self, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), self.logits.len());
        Self {
            logits,
            ..self.clone()
        }
    }

    fn check(&self, prompt: usize, token: TokenId) -> Result<(), PolicyError> {
        if prompt >= self.num_prompts || token as usize >= self.vocab_size {
            return Err(PolicyError::IndexOutOfRange {
                prompt,
                token,
                num_prompts: self.num_prompts,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    pub fn row(&self, prompt: usize) -> &[f64] {
        &self.logits[prompt * self.vocab_size..(prompt + 1) * self.vocab_size]
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        let row = self.row(prompt);
        let lse = log_sum_exp(row);
        row.iter().map(|x| (x - lse).exp()).collect()
    }

    /// Full gradient of `log pi(token | prompt)`: `onehot(token) - softmax`
    /// in the prompt's row, zero elsewhere.
    pub fn grad_log_prob(&self, prompt: usize, token: TokenId) -> Result<Vec<f64>, PolicyError> {
        let mut g = vec![0.0; self.logits.len()];
        self.add_grad_log_prob(prompt, token, 1.0, &mut g)?;
        Ok(g)
    }

    /// Draws `length` tokens from the prompt's distribution.
    pub fn sample_tokens(
        &self,
        prompt: usize,
        length: usize,
        rng: &mut impl Rng,
    ) -> Result<(Vec<TokenId>, Vec<f64>), PolicyError> {
        self.check(prompt, 0)?;
        let probs = self.probs(prompt);
        let lse = log_sum_exp(self.row(prompt));
        let mut tokens = Vec::with_capacity(length);
        let mut logps = Vec::with_capacity(length);
        for _ in 0..length {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut tok = self.vocab_size - 1;
            for (t, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = t;
                    break;
                }
            }
            tokens.push(tok as TokenId);
            logps.push(self.row(prompt)[tok] - lse);
        }
        Ok((tokens, logps))
    }

    /// Samples a rollout skeleton. The reward is left at zero.
    pub fn sample_trajectory(
        &self,
        prompt_id: &str,
        context: usize,
        side: Side,
        length: usize,
        rng: &mut impl Rng,
    ) -> Result<Trajectory, PolicyError> {
        let (tokens, old_logps) = self.sample_tokens(context, length.max(1), rng)?;
        Ok(Trajectory {
            prompt_id: prompt_id.to_string(),
            context,
            side,
            tokens,
            old_logps,
            reward: 0.0,
            pair: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, PolicyError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let p: ToyPolicy = serde_json::from_str(text)?;
        if p.num_prompts * p.vocab_size != p.logits.len() {
            return Err(PolicyError::BadCheckpoint {
                rows: p.num_prompts,
                cols: p.vocab_size,
                len: p.logits.len(),
            });
        }
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl TokenPolicy for ToyPolicy {
    fn num_params(&self) -> usize {
        self.logits.len()
    }

    fn log_prob(&self, context: usize, token: TokenId) -> Result<f64, PolicyError> {
        self.check(context, token)?;
        let row = self.row(context);
        Ok(row[token as usize] - log_sum_exp(row))
    }

    fn add_grad_log_prob(
        &self,
        context: usize,
        token: TokenId,
        scale: f64,
        out: &mut [f64],
    ) -> Result<(), PolicyError> {
        self.check(context, token)?;
        let probs = self.probs(context);
        let base = context * self.vocab_size;
        for (j, p) in probs.iter().enumerate() {
            let onehot = if j == token as usize { 1.0 } else { 0.0 };
            out[base + j] += scale * (onehot - p);
        }
        Ok(())
    }
}

/// Reproducible random stream `stream` under root `seed`.
pub fn rollout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_oracle(f: impl Fn(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let hi = f(&x);
            x[i] = orig - step;
            let lo = f(&x);
            x[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_log_prob() {
        let p = ToyPolicy::new(2, 4, 0);
        for t in 0..4 {
            assert!((p.log_prob(1, t).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        }
        assert!(matches!(
            p.log_prob(2, 0),
            Err(PolicyError::IndexOutOfRange { .. })
        ));
        assert!(p.log_prob(0, 4).is_err());
    }

    #[test]
    fn peaked_log_prob_matches_direct_sum() {
        let mut p = ToyPolicy::new(1, 4, 0);
        p.logits[0] = 10.0;
        let direct = (10.0f64.exp() + 3.0).ln();
        assert!((p.log_prob(0, 0).unwrap() - (10.0 - direct)).abs() < 1e-12);
        assert!((p.log_prob(0, 1).unwrap() + direct).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let p = ToyPolicy::random(3, 5, 7, 2.0);
        let mut q = p.clone();
        for x in &mut q.logits[5..10] {
            *x += 3.5;
        }
        for t in 0..5 {
            assert!((p.log_prob(1, t).unwrap() - q.log_prob(1, t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization() {
        let p = ToyPolicy::random(4, 16, 3, 3.0);
        for r in 0..4 {
            let s: f64 = (0..16).map(|t| p.log_prob(r, t).unwrap().exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn grad_examples() {
        let p = ToyPolicy::new(1, 2, 0);
        assert_eq!(p.grad_log_prob(0, 0).unwrap(), vec![0.5, -0.5]);

        let p = ToyPolicy::random(3, 6, 11, 2.0);
        for prompt in 0..3 {
            for tok in 0..6 {
                let g = p.grad_log_prob(prompt, tok).unwrap();
                for r in 0..3 {
                    let s: f64 = g[r * 6..(r + 1) * 6].iter().sum();
                    assert!(s.abs() < 1e-12);
                    if r != prompt {
                        assert!(g[r * 6..(r + 1) * 6].iter().all(|&x| x == 0.0));
                    }
                }
                let fd = finite_diff_oracle(
                    |theta| p.with_params(theta.to_vec()).log_prob(prompt, tok).unwrap(),
                    p.params(),
                    1e-5,
                );
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn sampling_law() {
        let p = ToyPolicy::random(1, 8, 5, 1.5);
        let probs = p.probs(0);
        let mut rng = rollout_rng(99, 0);
        let n = 10_000;
        let (tokens, logps) = p.sample_tokens(0, n, &mut rng).unwrap();
        let mut counts = [0usize; 8];
        for (t, lp) in tokens.iter().zip(&logps) {
            counts[*t as usize] += 1;
            assert_eq!(*lp, p.log_prob(0, *t).unwrap());
        }
        for (c, pr) in counts.iter().zip(&probs) {
            let freq = *c as f64 / n as f64;
            let se = (pr * (1.0 - pr) / n as f64).sqrt();
            assert!((freq - pr).abs() <= 3.0 * se, "freq {freq} p {pr}");
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = ToyPolicy::random(2, 8, 1, 1.0);
        let a = p.sample_tokens(1, 20, &mut rollout_rng(4, 2)).unwrap();
        let b = p.sample_tokens(1, 20, &mut rollout_rng(4, 2)).unwrap();
        let c = p.sample_tokens(1, 20, &mut rollout_rng(4, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = ToyPolicy::random(4, 16, 21, 3.0);
        let back = ToyPolicy::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        let bad = r#"{"num_prompts":2,"vocab_size":2,"seed":0,"logits":[0.0]}"#;
        assert!(matches!(
            ToyPolicy::from_json(bad),
            Err(PolicyError::BadCheckpoint { .. })
        ));
    }
}
