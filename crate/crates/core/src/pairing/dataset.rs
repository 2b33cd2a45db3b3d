//! The emitted pair dataset, its statistics sidecar, and validation.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{
    aligned_from_model, build_aligned, build_retrieved, request_augmentation, AugmentationClient,
    AugmentationRequest, Direction, PairKind, PairingConfig, PairingError, Quadruple,
    QuadrupleIndex, UGPair,
};
use crate::clustering::{default_k, ClusterModel, ClusteringConfig};
use crate::features::{FeatureSet, FeatureVector, ItemKey, Source};

/// Histogram bin width for similarity statistics.
pub const BIN_WIDTH: f64 = 0.05;
const NUM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndSide {
    pub image: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSide {
    pub image: String,
    pub caption: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairMeta {
    pub und_id: String,
    pub gen_id: String,
    /// Split of the medoid an aligned pair was built from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Source>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_type: Option<String>,
}

/// One line of the pair dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub kind: PairKind,
    pub similarity: f64,
    pub weight: f64,
    pub und: UndSide,
    pub gen: GenSide,
    #[serde(default)]
    pub meta: PairMeta,
}

impl PairRecord {
    pub fn to_pair(&self) -> UGPair {
        UGPair {
            und_id: self.meta.und_id.clone(),
            gen_id: self.meta.gen_id.clone(),
            kind: self.kind,
            similarity: self.similarity,
            weight: self.weight,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindCounts {
    pub aligned: usize,
    pub retrieved: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub aligned: usize,
    pub retrieved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl WeightSummary {
    fn of(ws: &[f64]) -> Option<Self> {
        if ws.is_empty() {
            return None;
        }
        Some(Self {
            min: ws.iter().copied().fold(f64::INFINITY, f64::min),
            mean: ws.iter().sum::<f64>() / ws.len() as f64,
            max: ws.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Contents of the stats sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub counts: KindCounts,
    pub similarity_histogram: Vec<HistogramBin>,
    /// Pairs with similarity below zero, outside the histogram range.
    pub below_zero: usize,
    pub weight_aligned: Option<WeightSummary>,
    pub weight_retrieved: Option<WeightSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_generation: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excluded_quadruples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn compute_stats(records: &[PairRecord]) -> PairStats {
    let mut counts = KindCounts::default();
    let mut bins: Vec<HistogramBin> = (0..NUM_BINS)
        .map(|i| HistogramBin {
            lo: i as f64 * BIN_WIDTH,
            hi: (i + 1) as f64 * BIN_WIDTH,
            aligned: 0,
            retrieved: 0,
        })
        .collect();
    let mut below_zero = 0;
    let (mut wa, mut wr) = (Vec::new(), Vec::new());
    for r in records {
        counts.total += 1;
        if r.similarity < 0.0 {
            below_zero += 1;
        } else {
            let i = ((r.similarity / BIN_WIDTH).floor() as usize).min(NUM_BINS - 1);
            match r.kind {
                PairKind::Aligned => bins[i].aligned += 1,
                PairKind::Retrieved => bins[i].retrieved += 1,
            }
        }
        match r.kind {
            PairKind::Aligned => {
                counts.aligned += 1;
                wa.push(r.weight);
            }
            PairKind::Retrieved => {
                counts.retrieved += 1;
                wr.push(r.weight);
            }
        }
    }
    PairStats {
        counts,
        similarity_histogram: bins,
        below_zero,
        weight_aligned: WeightSummary::of(&wa),
        weight_retrieved: WeightSummary::of(&wr),
        skipped_generation: None,
        excluded_quadruples: None,
        config: None,
    }
}

/// A broken dataset invariant, anchored to the 1-based line of the record.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub line: usize,
    pub pair_id: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {} ({}): {}", self.line, self.pair_id, self.message)
    }
}

/// Checks threshold, weight law and single-use invariants.
pub fn verify_pairs(records: &[PairRecord], delta: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |i: usize, r: &PairRecord, message: String| {
        out.push(Violation {
            line: i + 1,
            pair_id: r.pair_id.clone(),
            message,
        })
    };
    let mut aligned_und = HashSet::new();
    let mut aligned_gen = HashSet::new();
    let mut ids = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if !ids.insert(r.pair_id.as_str()) {
            push(i, r, "duplicate pair_id".into());
        }
        if !r.similarity.is_finite() || !r.weight.is_finite() {
            push(i, r, "non-finite similarity or weight".into());
            continue;
        }
        if !(r.weight > 0.0 && r.weight <= 1.0) {
            push(i, r, format!("weight {} outside (0, 1]", r.weight));
        }
        if r.kind == PairKind::Aligned {
            if r.weight != 1.0 {
                push(i, r, format!("aligned pair has weight {}", r.weight));
            }
            match r.meta.anchor {
                Some(Source::Generation) => aligned_gen.insert(r.meta.gen_id.as_str()),
                _ => aligned_und.insert(r.meta.und_id.as_str()),
            };
        }
    }
    let mut used_und = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if r.kind != PairKind::Retrieved || !r.similarity.is_finite() {
            continue;
        }
        if r.similarity < delta {
            push(
                i,
                r,
                format!("similarity {} below threshold {delta}", r.similarity),
            );
        }
        if r.similarity > 1.0 {
            push(i, r, format!("similarity {} above 1", r.similarity));
        }
        let expected = r.similarity.max(0.0).sqrt();
        if (r.weight - expected).abs() > 1e-12 {
            push(
                i,
                r,
                format!(
                    "weight {} differs from sqrt(similarity) {expected}",
                    r.weight
                ),
            );
        }
        if !used_und.insert(r.meta.und_id.as_str()) {
            push(
                i,
                r,
                format!("understanding item `{}` reused", r.meta.und_id),
            );
        }
        if aligned_und.contains(r.meta.und_id.as_str()) {
            push(
                i,
                r,
                format!("understanding medoid `{}` reused", r.meta.und_id),
            );
        }
        if aligned_gen.contains(r.meta.gen_id.as_str()) {
            push(
                i,
                r,
                format!("generation medoid `{}` reused", r.meta.gen_id),
            );
        }
    }
    out
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<PairRecord>, PairingError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| PairingError::Schema {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

impl PairDataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Vec<PairRecord>, PairingError> {
        let file = std::fs::File::open(path)?;
        read_pairs(std::io::BufReader::new(file))
    }
}

pub fn write_pairs<W: std::io::Write>(mut out: W, records: &[PairRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Everything produced by one pipeline run.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
    pub pairs: Vec<UGPair>,
    pub stats: PairStats,
    pub model: ClusterModel,
}

fn complete_medoid(
    key: &ItemKey,
    quad: &Quadruple,
    augmenter: Option<&dyn AugmentationClient>,
) -> Result<Quadruple, PairingError> {
    if quad.is_complete() {
        return Ok(quad.clone());
    }
    let client = augmenter.ok_or_else(|| PairingError::IncompleteQuadruple(key.clone()))?;
    let direction = match quad.origin {
        Source::Understanding => Direction::CompleteCaption,
        Source::Generation => Direction::CompleteQA,
    };
    let template_id = quad
        .task_type
        .clone()
        .unwrap_or_else(|| "default".to_string());
    let req = AugmentationRequest {
        direction,
        quadruple: quad.clone(),
        template_id,
    };
    Ok(request_augmentation(&req, client)?)
}

fn lookup<'a>(quads: &'a QuadrupleIndex, key: &ItemKey) -> Result<&'a Quadruple, PairingError> {
    quads
        .get(key)
        .ok_or_else(|| PairingError::MissingQuadruple(key.clone()))
}

/// Runs the full pairing pipeline.
///
/// `clustering.k` is replaced by `cfg.k` (or the 5% default); `resume`
/// skips the k-means fit and reuses a stored model.
pub fn build_pair_dataset(
    und: &FeatureSet,
    gen: &FeatureSet,
    quads: &QuadrupleIndex,
    cfg: &PairingConfig,
    clustering: &ClusteringConfig,
    resume: Option<ClusterModel>,
    augmenter: Option<&dyn AugmentationClient>,
) -> Result<PairDataset, PairingError> {
    cfg.validate()?;
    if und.dim() != gen.dim() {
        return Err(PairingError::DimMismatch {
            und: und.dim(),
            gen: gen.dim(),
        });
    }
    let joint: Vec<FeatureVector> = und.vectors().iter().chain(gen.vectors()).cloned().collect();
    let feature_keys: HashSet<ItemKey> = joint.iter().map(|v| v.key()).collect();
    for v in &joint {
        lookup(quads, &v.key())?;
    }
    let excluded = quads.keys().filter(|k| !feature_keys.contains(*k)).count();
    if excluded > 0 {
        warn!(
            excluded,
            "quadruples without a feature vector were excluded"
        );
    }

    let selection = match resume {
        Some(model) => aligned_from_model(model, &joint)?,
        None => {
            let clustering = ClusteringConfig {
                k: cfg.k.unwrap_or_else(|| default_k(joint.len())),
                ..clustering.clone()
            };
            build_aligned(&joint, &clustering)?
        }
    };

    let mut records = Vec::new();
    let mut pairs = Vec::new();
    let medoid_set: HashSet<&ItemKey> = selection.medoids.iter().collect();
    for (i, key) in selection.medoids.iter().enumerate() {
        let quad = complete_medoid(key, lookup(quads, key)?, augmenter)?;
        let pair = UGPair::aligned(&key.id);
        records.push(PairRecord {
            pair_id: format!("aligned-{i:05}"),
            kind: PairKind::Aligned,
            similarity: pair.similarity,
            weight: pair.weight,
            und: UndSide {
                image: quad.image.clone(),
                question: quad.question.clone(),
                answer: quad.answer.clone(),
            },
            gen: GenSide {
                image: quad.image.clone(),
                caption: quad.caption.clone(),
            },
            meta: PairMeta {
                und_id: key.id.clone(),
                gen_id: key.id.clone(),
                anchor: Some(key.source),
                cluster: selection.model.cluster_of(key),
                task_type: quad.task_type.clone(),
            },
        });
        pairs.push(pair);
    }

    let und_rem: Vec<FeatureVector> = und
        .vectors()
        .iter()
        .filter(|v| !medoid_set.contains(&v.key()))
        .cloned()
        .collect();
    let gen_rem: Vec<FeatureVector> = gen
        .vectors()
        .iter()
        .filter(|v| !medoid_set.contains(&v.key()))
        .cloned()
        .collect();
    let retrieved = build_retrieved(&gen_rem, &und_rem, cfg);
    let matched_gen: HashSet<&str> = retrieved.iter().map(|p| p.gen_id.as_str()).collect();
    let skipped = gen_rem.len() - matched_gen.len();
    if skipped > 0 {
        warn!(
            skipped,
            delta = cfg.delta,
            "generation items had no neighbor at or above threshold"
        );
    }
    for (i, pair) in retrieved.iter().enumerate() {
        let uq = lookup(
            quads,
            &ItemKey::new(Source::Understanding, pair.und_id.clone()),
        )?;
        let gq = lookup(
            quads,
            &ItemKey::new(Source::Generation, pair.gen_id.clone()),
        )?;
        records.push(PairRecord {
            pair_id: format!("retrieved-{i:05}"),
            kind: PairKind::Retrieved,
            similarity: pair.similarity,
            weight: pair.weight,
            und: UndSide {
                image: uq.image.clone(),
                question: uq.question.clone(),
                answer: uq.answer.clone(),
            },
            gen: GenSide {
                image: gq.image.clone(),
                caption: gq.caption.clone(),
            },
            meta: PairMeta {
                und_id: pair.und_id.clone(),
                gen_id: pair.gen_id.clone(),
                anchor: None,
                cluster: None,
                task_type: uq.task_type.clone(),
            },
        });
    }
    pairs.extend(retrieved);
    info!(
        aligned = selection.medoids.len(),
        retrieved = records.len() - selection.medoids.len(),
        "pair dataset built"
    );

    let mut stats = compute_stats(&records);
    stats.skipped_generation = Some(skipped);
    stats.excluded_quadruples = Some(excluded);
    Ok(PairDataset {
        records,
        pairs,
        stats,
        model: selection.model,
    })
}
