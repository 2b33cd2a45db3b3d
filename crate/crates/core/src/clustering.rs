//! Mini-batch k-means over the joint embedding space, and medoid extraction.
//!
//! Initialization is k-means++ driven by `ClusteringConfig::seed`. Each
//! iteration draws a mini-batch, assigns it against the current centroids and
//! moves every touched centroid toward its points with step `1 / count`,
//! where `count` is the number of points that centroid has absorbed so far.
//! After the loop all points are assigned once more, empty clusters are
//! repaired, and inertia is computed over the full set.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{dot, FeatureVector, ItemKey};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least k={k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("invalid clustering config: {0}")]
    InvalidConfig(String),
    #[error("points have inconsistent dimensions")]
    DimMismatch,
    #[error("model does not match features: {0}")]
    ModelMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    pub k: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub convergence_tol: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: 8,
            batch_size: 256,
            max_iters: 100,
            seed: 0,
            convergence_tol: 1e-4,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.k == 0 {
            return Err(ClusterError::InvalidConfig("k must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ClusterError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(ClusterError::InvalidConfig(
                "max_iters must be positive".into(),
            ));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol < 0.0 {
            return Err(ClusterError::InvalidConfig(
                "convergence_tol must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Cluster count used for the aligned-pair stage when none is configured:
/// about one cluster per twenty items.
pub fn default_k(num_points: usize) -> usize {
    ((num_points as f64) * 0.05).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    #[serde(flatten)]
    pub key: ItemKey,
    pub cluster: usize,
}

/// A fitted clustering, serializable for `pair build --resume`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub config: ClusteringConfig,
    pub centroids: Vec<Vec<f64>>,
    /// One entry per input point, in input order.
    pub assignments: Vec<Assignment>,
    pub inertia: f64,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_of(&self, key: &ItemKey) -> Option<usize> {
        self.assignments
            .iter()
            .find(|a| &a.key == key)
            .map(|a| a.cluster)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its nearest centroid.
pub fn inertia(points: &[&[f64]], centroids: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| nearest(p, centroids).1).sum()
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// center the lowest unchosen index is taken.
pub fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            (0..n).find(|&i| !chosen[i]).expect("k <= n")
        };
        chosen[next] = true;
        centroids.push(points[next].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    centroids
}

fn assign_all(points: &[&[f64]], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids).0).collect()
}

/// Moves the centroid of each empty cluster onto the point farthest from its
/// own centroid, then reassigns. Bounded by `k` rounds.
fn repair_empty(points: &[&[f64]], centroids: &mut [Vec<f64>], labels: &mut [usize]) {
    let k = centroids.len();
    let mut used: HashSet<usize> = HashSet::new();
    for _ in 0..k {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if empty.is_empty() {
            return;
        }
        for c in empty {
            let far = (0..points.len())
                .filter(|i| !used.contains(i))
                .map(|i| (i, sq_dist(points[i], &centroids[labels[i]])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            let Some((i, _)) = far else { return };
            used.insert(i);
            centroids[c] = points[i].to_vec();
            labels[i] = c;
        }
        reassign_keeping_ties(points, centroids, labels);
    }
}

/// Full-batch Lloyd iterations until the labels stop changing. Every step
/// is non-increasing in inertia.
fn lloyd_polish(
    points: &[&[f64]],
    mut centroids: Vec<Vec<f64>>,
    max_iters: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut labels = assign_all(points, &centroids);
    repair_empty(points, &mut centroids, &mut labels);
    for _ in 0..max_iters {
        refresh_means(points, &mut centroids, &labels);
        let before = labels.clone();
        reassign_keeping_ties(points, &centroids, &mut labels);
        repair_empty(points, &mut centroids, &mut labels);
        if labels == before {
            break;
        }
    }
    (centroids, labels)
}

fn refresh_means(points: &[&[f64]], centroids: &mut [Vec<f64>], labels: &[usize]) {
    let mut counts = vec![0usize; centroids.len()];
    let mut sums = vec![vec![0.0; centroids[0].len()]; centroids.len()];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
        if n > 0 {
            *c = s.into_iter().map(|x| x / n as f64).collect();
        }
    }
}

/// Nearest-centroid labels where a point already at minimal distance keeps
/// its current label.
fn reassign_keeping_ties(points: &[&[f64]], centroids: &[Vec<f64>], labels: &mut [usize]) {
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let (c, d) = nearest(p, centroids);
        if sq_dist(p, &centroids[*l]) > d {
            *l = c;
        }
    }
}

/// Fits mini-batch k-means. `points` may mix both splits; keys must be unique.
pub fn fit_minibatch_kmeans(
    points: &[FeatureVector],
    cfg: &ClusteringConfig,
) -> Result<ClusterModel, ClusterError> {
    cfg.validate()?;
    let n = points.len();
    if n < cfg.k {
        return Err(ClusterError::TooFewPoints { k: cfg.k, n });
    }
    let dim = points[0].dim();
    if points.iter().any(|p| p.dim() != dim) {
        return Err(ClusterError::DimMismatch);
    }
    let mut keys = HashSet::new();
    for p in points {
        if !keys.insert(p.key()) {
            return Err(ClusterError::ModelMismatch(format!(
                "duplicate key {}",
                p.key()
            )));
        }
    }
    let data: Vec<&[f64]> = points.iter().map(|p| p.values()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_plus_plus(&data, cfg.k, &mut rng);
    let seeding = centroids.clone();
    let mut counts = vec![0u64; cfg.k];
    let batch = cfg.batch_size.min(n);
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        let mut idx: Vec<usize> = if batch == n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, batch).into_vec()
        };
        idx.sort_unstable();
        let labels: Vec<usize> = idx
            .iter()
            .map(|&i| nearest(data[i], &centroids).0)
            .collect();
        let before = centroids.clone();
        for (&i, &c) in idx.iter().zip(&labels) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (cv, x) in centroids[c].iter_mut().zip(data[i]) {
                *cv += eta * (x - *cv);
            }
        }
        let shift = before
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        if shift < cfg.convergence_tol {
            break;
        }
    }

    // Running means weight early samples unevenly and small batches can
    // drift, so finish with full-batch refinement and never end above the
    // seeding's inertia.
    let (mut centroids, mut labels) = lloyd_polish(&data, centroids, cfg.max_iters);
    let mut inertia = inertia(&data, &centroids);
    if inertia > self::inertia(&data, &seeding) {
        (centroids, labels) = lloyd_polish(&data, seeding, cfg.max_iters);
        inertia = self::inertia(&data, &centroids);
    }
    let assignments = points
        .iter()
        .zip(&labels)
        .map(|(p, &cluster)| Assignment {
            key: p.key(),
            cluster,
        })
        .collect();
    Ok(ClusterModel {
        config: cfg.clone(),
        centroids,
        assignments,
        inertia,
        iterations,
    })
}

/// For every non-empty cluster, the member with the largest inner product
/// with its centroid. Ties go to the smaller id. Returned in cluster order.
pub fn select_medoids(
    model: &ClusterModel,
    points: &[FeatureVector],
) -> Result<Vec<ItemKey>, ClusterError> {
    let by_key: std::collections::HashMap<ItemKey, &FeatureVector> =
        points.iter().map(|p| (p.key(), p)).collect();
    let mut best: Vec<Option<(f64, &ItemKey)>> = vec![None; model.k()];
    for a in &model.assignments {
        let f = by_key
            .get(&a.key)
            .ok_or_else(|| ClusterError::ModelMismatch(format!("unknown id {}", a.key)))?;
        let centroid = model.centroids.get(a.cluster).ok_or_else(|| {
            ClusterError::ModelMismatch(format!("cluster {} out of range", a.cluster))
        })?;
        if centroid.len() != f.dim() {
            return Err(ClusterError::DimMismatch);
        }
        let score = dot(f.values(), centroid);
        let slot = &mut best[a.cluster];
        let replace = match slot {
            None => true,
            Some((s, k)) => {
                score > *s || (score == *s && (&a.key.id, a.key.source) < (&k.id, k.source))
            }
        };
        if replace {
            *slot = Some((score, &a.key));
        }
    }
    Ok(best.into_iter().flatten().map(|(_, k)| k.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Source;

    fn pt(id: &str, raw: &[f64]) -> FeatureVector {
        FeatureVector::new(id, Source::Understanding, raw).unwrap()
    }

    fn two_groups() -> Vec<FeatureVector> {
        vec![
            pt("a0", &[1.0, 0.05]),
            pt("a1", &[1.0, -0.05]),
            pt("a2", &[1.0, 0.1]),
            pt("a3", &[1.0, 0.0]),
            pt("b0", &[0.05, 1.0]),
            pt("b1", &[-0.05, 1.0]),
            pt("b2", &[0.1, 1.0]),
            pt("b3", &[0.0, 1.0]),
        ]
    }

    /// Exhaustive optimum over all 2-partitions of the points.
    fn brute_force_two_partition(points: &[FeatureVector]) -> (Vec<usize>, f64) {
        let n = points.len();
        let mut best = (vec![], f64::INFINITY);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for c in 0..2 {
                let members: Vec<&[f64]> = (0..n)
                    .filter(|&i| labels[i] == c)
                    .map(|i| points[i].values())
                    .collect();
                let d = members[0].len();
                let mean: Vec<f64> = (0..d)
                    .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                cost += members.iter().map(|m| sq_dist(m, &mean)).sum::<f64>();
            }
            if cost < best.1 {
                best = (labels, cost);
            }
        }
        best
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn separates_two_groups_for_any_seed() {
        let pts = two_groups();
        let (oracle, oracle_cost) = brute_force_two_partition(&pts);
        for seed in 0..20 {
            let cfg = ClusteringConfig {
                k: 2,
                batch_size: 4,
                seed,
                ..Default::default()
            };
            let m = fit_minibatch_kmeans(&pts, &cfg).unwrap();
            let labels: Vec<usize> = m.assignments.iter().map(|a| a.cluster).collect();
            assert!(same_partition(&labels, &oracle), "seed {seed}");
            assert!(
                m.inertia <= oracle_cost * 1.05 + 1e-12,
                "seed {seed}: {} vs {oracle_cost}",
                m.inertia
            );
        }
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let pts = two_groups();
        let cfg = ClusteringConfig {
            k: pts.len(),
            ..Default::default()
        };
        let m = fit_minibatch_kmeans(&pts, &cfg).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut clusters: Vec<usize> = m.assignments.iter().map(|a| a.cluster).collect();
        clusters.sort_unstable();
        clusters.dedup();
        assert_eq!(clusters.len(), pts.len());
    }

    #[test]
    fn k_one_centroid_is_mean() {
        let pts = two_groups();
        let cfg = ClusteringConfig {
            k: 1,
            batch_size: 3,
            ..Default::default()
        };
        let m = fit_minibatch_kmeans(&pts, &cfg).unwrap();
        assert!(m.assignments.iter().all(|a| a.cluster == 0));
        let mean: Vec<f64> = (0..2)
            .map(|j| pts.iter().map(|p| p.values()[j]).sum::<f64>() / pts.len() as f64)
            .collect();
        for (c, m) in m.centroids[0].iter().zip(&mean) {
            assert!((c - m).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points() {
        let pts = two_groups();
        let cfg = ClusteringConfig {
            k: 9,
            ..Default::default()
        };
        assert!(matches!(
            fit_minibatch_kmeans(&pts, &cfg),
            Err(ClusterError::TooFewPoints { k: 9, n: 8 })
        ));
    }

    #[test]
    fn deterministic_serialization() {
        let pts = two_groups();
        let cfg = ClusteringConfig {
            k: 3,
            batch_size: 3,
            seed: 42,
            ..Default::default()
        };
        let a = serde_json::to_string(&fit_minibatch_kmeans(&pts, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&fit_minibatch_kmeans(&pts, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let back: ClusterModel = serde_json::from_str(&a).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts: Vec<FeatureVector> = (0..5).map(|i| pt(&format!("p{i}"), &[1.0, 0.0])).collect();
        let cfg = ClusteringConfig {
            k: 3,
            ..Default::default()
        };
        let m = fit_minibatch_kmeans(&pts, &cfg).unwrap();
        assert_eq!(m.inertia, 0.0);
        assert_eq!(select_medoids(&m, &pts).unwrap().len(), 3);
    }

    #[test]
    fn medoid_examples() {
        let pts = vec![pt("x", &[1.0, 0.0]), pt("y", &[0.8, 0.6])];
        let model = ClusterModel {
            config: ClusteringConfig::default(),
            centroids: vec![vec![0.99, 0.14]],
            assignments: pts
                .iter()
                .map(|p| Assignment {
                    key: p.key(),
                    cluster: 0,
                })
                .collect(),
            inertia: 0.0,
            iterations: 0,
        };
        // <x,c> = 0.99, <y,c> = 0.792 + 0.084 = 0.876
        assert_eq!(select_medoids(&model, &pts).unwrap()[0].id, "x");

        let single = vec![pt("only", &[0.0, 1.0])];
        let m1 = ClusterModel {
            centroids: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            assignments: vec![Assignment {
                key: single[0].key(),
                cluster: 0,
            }],
            ..model.clone()
        };
        let meds = select_medoids(&m1, &single).unwrap();
        assert_eq!(meds.len(), 1);
        assert_eq!(meds[0].id, "only");

        let tie = vec![pt("b", &[1.0, 1.0]), pt("a", &[1.0, -1.0])];
        let m2 = ClusterModel {
            centroids: vec![vec![1.0, 0.0]],
            assignments: tie
                .iter()
                .map(|p| Assignment {
                    key: p.key(),
                    cluster: 0,
                })
                .collect(),
            ..model.clone()
        };
        assert_eq!(select_medoids(&m2, &tie).unwrap()[0].id, "a");

        let bad = ClusterModel {
            assignments: vec![Assignment {
                key: ItemKey::new(Source::Generation, "ghost"),
                cluster: 0,
            }],
            ..model
        };
        assert!(matches!(
            select_medoids(&bad, &pts),
            Err(ClusterError::ModelMismatch(_))
        ));
    }

    #[test]
    fn default_k_is_five_percent() {
        assert_eq!(default_k(100), 5);
        assert_eq!(default_k(101), 6);
        assert_eq!(default_k(1), 1);
    }
}
