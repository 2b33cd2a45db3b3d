//! Synthetic feature corpora: concept centers on the unit sphere with noisy
//! understanding and generation items scattered around them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::features::{FeatureError, FeatureSet, FeatureVector, Source};
use crate::pairing::{Quadruple, QuadrupleIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub concepts: usize,
    pub und_per_concept: usize,
    pub gen_per_concept: usize,
    pub dim: usize,
    /// Per-coordinate noise scale is drawn uniformly from this range per item.
    pub noise: [f64; 2],
    /// Share of items whose quadruple only carries its native fields.
    pub incomplete_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            concepts: 12,
            und_per_concept: 8,
            gen_per_concept: 8,
            dim: 16,
            noise: [0.05, 0.25],
            incomplete_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub und: FeatureSet,
    pub gen: FeatureSet,
    pub quadruples: Vec<Quadruple>,
}

impl SynthCorpus {
    pub fn index(&self) -> QuadrupleIndex {
        QuadrupleIndex::new(self.quadruples.iter().cloned())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus, FeatureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..cfg.concepts)
        .map(|_| crate::features::l2_normalize(&gaussian(&mut rng, cfg.dim, 1.0)))
        .collect::<Result<_, _>>()?;
    let mut und = Vec::new();
    let mut gen = Vec::new();
    let mut quads = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for (source, count) in [
            (Source::Understanding, cfg.und_per_concept),
            (Source::Generation, cfg.gen_per_concept),
        ] {
            for j in 0..count {
                let scale = rng.gen_range(cfg.noise[0]..=cfg.noise[1]);
                let noise = gaussian(&mut rng, cfg.dim, scale);
                let raw: Vec<f64> = center.iter().zip(&noise).map(|(a, b)| a + b).collect();
                let id = format!("{}-c{c:02}-{j:03}", source.tag());
                let v = FeatureVector::new(id.clone(), source, &raw)?;
                let complete = rng.gen::<f64>() >= cfg.incomplete_fraction;
                let image = format!("img/{id}.png");
                let caption = format!("a picture of concept {c}");
                let question = format!("which concept is shown in item {j}?");
                let answer = format!("concept {c}");
                let q = match (source, complete) {
                    (_, true) => Quadruple {
                        id,
                        origin: source,
                        image,
                        caption,
                        question,
                        answer,
                        task_type: Some(format!("concept-{c:02}")),
                    },
                    (Source::Understanding, false) => Quadruple {
                        id,
                        origin: source,
                        image,
                        caption: String::new(),
                        question,
                        answer,
                        task_type: None,
                    },
                    (Source::Generation, false) => Quadruple {
                        id,
                        origin: source,
                        image,
                        caption,
                        question: String::new(),
                        answer: String::new(),
                        task_type: None,
                    },
                };
                quads.push(q);
                match source {
                    Source::Understanding => und.push(v),
                    Source::Generation => gen.push(v),
                }
            }
        }
    }
    Ok(SynthCorpus {
        und: FeatureSet::new(Source::Understanding, und)?,
        gen: FeatureSet::new(Source::Generation, gen)?,
        quadruples: quads,
    })
}
