//! Popularity and rating matched negative sampling.
//!
//! The draw proceeds in widening passes:
//!
//! 1. the band pool (items individually within both tolerances of the
//!    positives' means); any subset of it is within tolerance on average;
//! 2. rejection draws from a neighbourhood of (popularity decile, half-star)
//!    buckets around the target, widening every quarter of the budget;
//! 3. greedy single-item swaps starting from the best draw so far;
//! 4. the best set found, flagged (or an error in strict mode).

use std::collections::HashSet;

use rand::Rng;

use super::{check_size, uniform_negatives, SampleOutcome, SamplerSpec, SamplingError};
use crate::dataset::{ItemId, ItemStats};

/// Mean popularity and mean rating of `items`.
pub fn mean_stats(items: &[ItemId], stats: &ItemStats) -> (f64, f64) {
    if items.is_empty() {
        return (0.0, 0.0);
    }
    let n = items.len() as f64;
    let pop: f64 = items.iter().map(|id| stats.popularity_of(id) as f64).sum();
    let rating: f64 = items.iter().map(|id| stats.mean_rating_of(id)).sum();
    (pop / n, rating / n)
}

/// The de-bias acceptance inequalities.
pub fn within_tolerance(candidate: (f64, f64), target: (f64, f64), spec: &SamplerSpec) -> bool {
    (candidate.0 - target.0).abs() <= spec.popularity_tolerance * target.0
        && (candidate.1 - target.1).abs() <= spec.rating_tolerance
}

struct Matcher<'a> {
    pop: Vec<f64>,
    rating: Vec<f64>,
    target: (f64, f64),
    spec: &'a SamplerSpec,
    k: usize,
}

impl Matcher<'_> {
    /// Squared normalised distance; both axes ≤ 1 means within tolerance.
    /// Squares rather than the max so a swap that helps either axis counts.
    fn error(&self, pop_sum: f64, rating_sum: f64) -> f64 {
        let k = self.k as f64;
        let pop_scale = (self.spec.popularity_tolerance * self.target.0).max(1e-12);
        let dp = (pop_sum / k - self.target.0).abs() / pop_scale;
        let dr = (rating_sum / k - self.target.1).abs() / self.spec.rating_tolerance;
        dp * dp + dr * dr
    }

    fn sums(&self, set: &[usize]) -> (f64, f64) {
        (set.iter().map(|&i| self.pop[i]).sum(), set.iter().map(|&i| self.rating[i]).sum())
    }

    fn accepts(&self, set: &[usize], universe: &[ItemId], stats: &ItemStats) -> bool {
        let ids: Vec<ItemId> = set.iter().map(|&i| universe[i].clone()).collect();
        within_tolerance(mean_stats(&ids, stats), self.target, self.spec)
    }

    /// Best single swap per round until accepted or no swap helps.
    fn refine(&self, set: &mut [usize], universe: &[ItemId], stats: &ItemStats) {
        let mut inside: HashSet<usize> = set.iter().copied().collect();
        let (mut ps, mut rs) = self.sums(set);
        for _ in 0..(4 * self.k).max(8) {
            if self.accepts(set, universe, stats) {
                return;
            }
            let current = self.error(ps, rs);
            let mut best: Option<(f64, usize, usize)> = None;
            for (slot, &out) in set.iter().enumerate() {
                for cand in 0..self.pop.len() {
                    if inside.contains(&cand) {
                        continue;
                    }
                    let e = self.error(ps - self.pop[out] + self.pop[cand], rs - self.rating[out] + self.rating[cand]);
                    if best.is_none_or(|(b, _, _)| e < b) {
                        best = Some((e, slot, cand));
                    }
                }
            }
            match best {
                Some((e, slot, cand)) if e < current => {
                    let out = set[slot];
                    inside.remove(&out);
                    inside.insert(cand);
                    ps += self.pop[cand] - self.pop[out];
                    rs += self.rating[cand] - self.rating[out];
                    set[slot] = cand;
                }
                _ => return,
            }
        }
    }
}

pub fn debias_negatives<R: Rng + ?Sized>(
    positives: &[ItemId],
    universe: &[ItemId],
    stats: &ItemStats,
    k: usize,
    spec: &SamplerSpec,
    rng: &mut R,
) -> Result<SampleOutcome, SamplingError> {
    check_size(universe, k)?;
    if k == 0 {
        return Ok(SampleOutcome { items: Vec::new(), warning: None });
    }
    if positives.is_empty() {
        return Err(SamplingError::Config("de-bias sampling needs at least one positive".into()));
    }
    let target = mean_stats(positives, stats);
    let matcher = Matcher {
        pop: universe.iter().map(|id| stats.popularity_of(id) as f64).collect(),
        rating: universe.iter().map(|id| stats.mean_rating_of(id)).collect(),
        target,
        spec,
        k,
    };

    // 1. band pool
    let band: Vec<ItemId> = universe
        .iter()
        .zip(matcher.pop.iter().zip(&matcher.rating))
        .filter(|(_, (&p, &r))| within_tolerance((p, r), target, spec))
        .map(|(id, _)| id.clone())
        .collect();
    if band.len() >= k {
        let items = uniform_negatives(&band, k, rng)?;
        return Ok(SampleOutcome { items, warning: None });
    }

    // 2. bucket neighbourhood rejection draws
    let mut order: Vec<usize> = (0..universe.len()).collect();
    order.sort_by(|&a, &b| matcher.pop[a].total_cmp(&matcher.pop[b]).then(a.cmp(&b)));
    let mut decile = vec![0usize; universe.len()];
    for (rank, &idx) in order.iter().enumerate() {
        decile[idx] = rank * 10 / universe.len();
    }
    let target_rank = order.partition_point(|&i| matcher.pop[i] < target.0).min(universe.len() - 1);
    let target_decile = target_rank * 10 / universe.len();
    let half_star = |r: f64| (r * 2.0).floor() as i64;
    let target_bin = half_star(target.1);
    let neighbourhood = |radius: usize| -> Vec<usize> {
        (0..universe.len())
            .filter(|&i| {
                decile[i].abs_diff(target_decile) <= radius && half_star(matcher.rating[i]).abs_diff(target_bin) as usize <= radius
            })
            .collect()
    };
    let mut radius = 0;
    let mut pool = neighbourhood(radius);
    while pool.len() < k && radius < 10 {
        radius += 1;
        pool = neighbourhood(radius);
    }
    if pool.len() < k {
        pool = (0..universe.len()).collect();
    }
    let widen_every = (spec.max_resamples / 4).max(1);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for attempt in 0..spec.max_resamples {
        if attempt > 0 && attempt % widen_every == 0 && radius < 10 {
            radius += 1;
            pool = neighbourhood(radius);
        }
        let draw: Vec<usize> = rand::seq::index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        if matcher.accepts(&draw, universe, stats) {
            return Ok(SampleOutcome { items: draw.iter().map(|&i| universe[i].clone()).collect(), warning: None });
        }
        let (ps, rs) = matcher.sums(&draw);
        let e = matcher.error(ps, rs);
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, draw));
        }
    }

    // 3. greedy swaps from the best draw
    let mut set = match best {
        Some((_, set)) => set,
        None => rand::seq::index::sample(rng, universe.len(), k).into_vec(),
    };
    matcher.refine(&mut set, universe, stats);
    let items: Vec<ItemId> = set.iter().map(|&i| universe[i].clone()).collect();
    if matcher.accepts(&set, universe, stats) {
        return Ok(SampleOutcome { items, warning: None });
    }

    // 4. best effort
    let got = mean_stats(&items, stats);
    let detail = format!(
        "target popularity {:.3} rating {:.3}; best match popularity {:.3} rating {:.3}",
        target.0, target.1, got.0, got.1
    );
    if spec.strict {
        return Err(SamplingError::ToleranceUnmet { attempts: spec.max_resamples, detail });
    }
    log::warn!("de-bias sampler fell back to nearest match: {detail}");
    Ok(SampleOutcome { items, warning: Some(detail) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats_for(items: &[(&str, u64, f64)]) -> ItemStats {
        let mut s = ItemStats { global_mean_rating: 3.5, ..Default::default() };
        for &(id, p, r) in items {
            s.popularity.insert(id.into(), p);
            s.mean_rating.insert(id.into(), r);
        }
        s
    }

    #[test]
    fn hand_computed_bounds() {
        // positives mean popularity 120, mean rating 4.2 → [108, 132] × [3.95, 4.45]
        let spec = SamplerSpec::debias();
        let target = (120.0, 4.2);
        assert!(within_tolerance((108.0, 3.95), target, &spec));
        assert!(within_tolerance((132.0, 4.45), target, &spec));
        assert!(!within_tolerance((107.9, 4.2), target, &spec));
        assert!(!within_tolerance((120.0, 4.46), target, &spec));
    }

    #[test]
    fn matches_positive_statistics() {
        let mut items = vec![("p1", 100, 4.0), ("p2", 140, 4.4)];
        let owned: Vec<(String, u64, f64)> =
            (0..200).map(|i| (format!("n{i:03}"), (i * 3) as u64, 1.0 + (i % 9) as f64 * 0.5)).collect();
        items.extend(owned.iter().map(|(a, b, c)| (a.as_str(), *b, *c)));
        let stats = stats_for(&items);
        let universe: Vec<ItemId> = owned.iter().map(|(id, _, _)| id.clone()).collect();
        let positives = vec!["p1".to_string(), "p2".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = debias_negatives(&positives, &universe, &stats, 9, &SamplerSpec::debias(), &mut rng).unwrap();
        assert!(out.warning.is_none());
        assert!(within_tolerance(mean_stats(&out.items, &stats), (120.0, 4.2), &SamplerSpec::debias()));
        assert_eq!(out.items.iter().collect::<HashSet<_>>().len(), 9);
    }

    #[test]
    fn adversarial_universe_warns_or_errors() {
        let stats = stats_for(&[("p", 1000, 5.0), ("a", 1, 1.0), ("b", 2, 1.0), ("c", 3, 1.5)]);
        let universe: Vec<ItemId> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = debias_negatives(&["p".into()], &universe, &stats, 2, &SamplerSpec::debias(), &mut rng).unwrap();
        assert!(out.warning.is_some());
        assert_eq!(out.items.len(), 2);
        let strict = SamplerSpec { strict: true, ..SamplerSpec::debias() };
        assert!(matches!(
            debias_negatives(&["p".into()], &universe, &stats, 2, &strict, &mut rng),
            Err(SamplingError::ToleranceUnmet { .. })
        ));
    }

    #[test]
    fn trivial_cases() {
        let stats = stats_for(&[("p", 5, 4.0), ("a", 5, 4.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = SamplerSpec::debias();
        assert!(debias_negatives(&["p".into()], &["a".into()], &stats, 0, &spec, &mut rng).unwrap().items.is_empty());
        assert!(matches!(
            debias_negatives(&["p".into()], &["a".into()], &stats, 2, &spec, &mut rng),
            Err(SamplingError::UniverseTooSmall { .. })
        ));
    }
}
