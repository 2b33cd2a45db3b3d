use std::cmp::Ordering;

use tracing::debug;

use super::{GreedyOrder, PairingConfig, UGPair};
use crate::features::{dot, FeatureVector};

fn by_sim_desc_then_id(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Indices of `gen` in the order the greedy matcher visits them.
pub fn retrieval_order(
    gen: &[FeatureVector],
    und: &[FeatureVector],
    order: GreedyOrder,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..gen.len()).collect();
    match order {
        GreedyOrder::Id => idx.sort_by(|&a, &b| gen[a].id.cmp(&gen[b].id)),
        GreedyOrder::MaxSimDesc => {
            let best: Vec<f64> = gen
                .iter()
                .map(|g| {
                    und.iter()
                        .map(|u| dot(g.values(), u.values()).clamp(-1.0, 1.0))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            idx.sort_by(|&a, &b| {
                best[b]
                    .total_cmp(&best[a])
                    .then_with(|| gen[a].id.cmp(&gen[b].id))
            });
        }
    }
    idx
}

/// Greedy top-`n` retrieval over the remaining items.
///
/// Each generation item takes the `n` most similar understanding items still
/// in the pool (ties by ascending id), keeps those at or above `delta`, and
/// removes them from the pool. A generation item with no qualifying neighbor
/// is skipped.
pub fn build_retrieved(
    gen_rem: &[FeatureVector],
    und_rem: &[FeatureVector],
    cfg: &PairingConfig,
) -> Vec<UGPair> {
    let mut alive = vec![true; und_rem.len()];
    let mut pairs = Vec::new();
    for gi in retrieval_order(gen_rem, und_rem, cfg.greedy_order) {
        let g = &gen_rem[gi];
        let mut cands: Vec<(f64, &str, usize)> = und_rem
            .iter()
            .enumerate()
            .filter(|(ui, _)| alive[*ui])
            .map(|(ui, u)| {
                (
                    dot(g.values(), u.values()).clamp(-1.0, 1.0),
                    u.id.as_str(),
                    ui,
                )
            })
            .collect();
        let cmp = |a: &(f64, &str, usize), b: &(f64, &str, usize)| {
            by_sim_desc_then_id(&(a.0, a.1), &(b.0, b.1))
        };
        if cands.len() > cfg.n {
            cands.select_nth_unstable_by(cfg.n - 1, cmp);
            cands.truncate(cfg.n);
        }
        cands.sort_by(cmp);
        let mut matched = 0;
        for (sim, uid, ui) in cands {
            if sim < cfg.delta {
                continue;
            }
            alive[ui] = false;
            pairs.push(UGPair::retrieved(uid, &g.id, sim));
            matched += 1;
        }
        if matched == 0 {
            debug!(gen_id = %g.id, "no understanding neighbor at or above threshold");
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Source;
    use crate::pairing::PairKind;

    fn unit(id: &str, source: Source, angle: f64) -> FeatureVector {
        FeatureVector::new(id, source, &[angle.cos(), angle.sin()]).unwrap()
    }

    /// Understanding vector at exactly cosine `sim` from the x axis.
    fn at_sim(id: &str, sim: f64) -> FeatureVector {
        unit(id, Source::Understanding, sim.acos())
    }

    fn cfg(n: usize, delta: f64) -> PairingConfig {
        PairingConfig {
            n,
            delta,
            ..Default::default()
        }
    }

    #[test]
    fn single_generation_item() {
        let gen = vec![unit("g1", Source::Generation, 0.0)];
        let und = vec![at_sim("u1", 0.9), at_sim("u2", 0.7)];
        let pairs = build_retrieved(&gen, &und, &cfg(1, 0.6));
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].und_id, "u1");
        assert_eq!(pairs[0].gen_id, "g1");
        assert_eq!(pairs[0].kind, PairKind::Retrieved);
        assert!((pairs[0].similarity - 0.9).abs() < 1e-12);
        assert!((pairs[0].weight - 0.9f64.sqrt()).abs() < 1e-12);

        assert!(build_retrieved(&gen, &und, &cfg(1, 0.95)).is_empty());
        assert_eq!(build_retrieved(&gen, &und, &cfg(2, 0.6)).len(), 2);
    }

    #[test]
    fn shared_best_neighbor_goes_to_first_visited() {
        // u1 sits at angle 0; g1 and g2 are placed so that sim(g1,u1)=0.9,
        // sim(g2,u1)=0.8 and g2's runner-up u2 sits at 0.7.
        let u1 = unit("u1", Source::Understanding, 0.0);
        let g1 = unit("g1", Source::Generation, 0.9f64.acos());
        let g2 = unit("g2", Source::Generation, -(0.8f64.acos()));
        let u2 = unit(
            "u2",
            Source::Understanding,
            -(0.8f64.acos()) - 0.7f64.acos(),
        );
        let und = vec![u1, u2];
        let gen = vec![g2.clone(), g1.clone()];
        let pairs = build_retrieved(&gen, &und, &cfg(1, 0.6));
        assert_eq!(pairs.len(), 2);
        assert_eq!(
            (pairs[0].gen_id.as_str(), pairs[0].und_id.as_str()),
            ("g1", "u1")
        );
        assert_eq!(
            (pairs[1].gen_id.as_str(), pairs[1].und_id.as_str()),
            ("g2", "u2")
        );
        assert!((pairs[1].similarity - 0.7).abs() < 1e-12);

        // with u2 out of reach g2 is skipped
        let far = unit("u2", Source::Understanding, 2.0);
        let pairs = build_retrieved(&gen, &[und[0].clone(), far], &cfg(1, 0.6));
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].gen_id, "g1");
    }

    #[test]
    fn max_sim_order_changes_who_wins() {
        let u1 = unit("u1", Source::Understanding, 0.0);
        let ga = unit("ga", Source::Generation, 0.5);
        let gb = unit("gb", Source::Generation, 0.1);
        let gen = vec![ga, gb];
        let und = vec![u1];
        let by_id = build_retrieved(&gen, &und, &cfg(1, 0.0));
        assert_eq!(by_id[0].gen_id, "ga");
        let by_sim = build_retrieved(
            &gen,
            &und,
            &PairingConfig {
                greedy_order: GreedyOrder::MaxSimDesc,
                ..cfg(1, 0.0)
            },
        );
        assert_eq!(by_sim.len(), 1);
        assert_eq!(by_sim[0].gen_id, "gb");
    }

    #[test]
    fn threshold_before_or_after_truncation_agree() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let gen: Vec<_> = (0..rng.gen_range(1..6))
                .map(|i| {
                    unit(
                        &format!("g{i}"),
                        Source::Generation,
                        rng.gen_range(-1.5..1.5),
                    )
                })
                .collect();
            let und: Vec<_> = (0..rng.gen_range(1..8))
                .map(|i| {
                    unit(
                        &format!("u{i}"),
                        Source::Understanding,
                        rng.gen_range(-1.5..1.5),
                    )
                })
                .collect();
            let c = cfg(rng.gen_range(1..4), rng.gen_range(0.0..1.0));

            // filter by delta first, then keep the n best survivors
            let mut alive = vec![true; und.len()];
            let mut expected = Vec::new();
            for g in &gen {
                let mut cands: Vec<(f64, &str, usize)> = und
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| alive[*i])
                    .map(|(i, u)| {
                        (
                            dot(g.values(), u.values()).clamp(-1.0, 1.0),
                            u.id.as_str(),
                            i,
                        )
                    })
                    .filter(|x| x.0 >= c.delta)
                    .collect();
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
                for (sim, uid, i) in cands.into_iter().take(c.n) {
                    alive[i] = false;
                    expected.push((uid.to_string(), g.id.clone(), sim));
                }
            }
            let got: Vec<_> = build_retrieved(&gen, &und, &c)
                .into_iter()
                .map(|p| (p.und_id, p.gen_id, p.similarity))
                .collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn empty_pools() {
        let g = vec![unit("g", Source::Generation, 0.0)];
        assert!(build_retrieved(&g, &[], &cfg(1, 0.0)).is_empty());
        assert!(build_retrieved(&[], &[at_sim("u", 1.0)], &cfg(1, 0.0)).is_empty());
    }
}
