//! Splits road areas into a significant (busy) and an insignificant group
//! by one-dimensional two-means clustering of yearly traffic volume.

use std::collections::{BTreeMap, BTreeSet};

use crate::ingestion::{TrafficRecord, DAYS_PER_YEAR};
use crate::{Error, Result};

/// Yearly traffic volume per area: the sum of its daily flow entries
/// divided by 365, regardless of how many days were actually reported.
pub fn total_aadf(records: &[TrafficRecord]) -> BTreeMap<u32, f64> {
    let mut per_area = BTreeMap::new();
    for rec in records {
        *per_area.entry(rec.area_id).or_insert(0.0) += rec.aadf_count;
    }
    for v in per_area.values_mut() {
        *v /= DAYS_PER_YEAR as f64;
    }
    per_area
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaPartition {
    pub significant: BTreeSet<u32>,
    pub insignificant: BTreeSet<u32>,
    /// Group centroids, `[insignificant, significant]` (low, high).
    pub centroids: [f64; 2],
    /// Total assignment iterations performed before the assignment fixed.
    pub iterations: usize,
}

impl AreaPartition {
    pub fn is_significant(&self, area_id: u32) -> bool {
        self.significant.contains(&area_id)
    }

    pub fn contains(&self, area_id: u32) -> bool {
        self.significant.contains(&area_id) || self.insignificant.contains(&area_id)
    }
}

/// Two-means clustering of the per-area volumes. Centroids start at the
/// minimum and maximum value and Lloyd assignment/update steps run until the
/// assignment is fixed; distance ties go to the significant group. A Lloyd
/// fixed point in one dimension is a threshold split but not necessarily the
/// best one, so the result is checked against the optimal contiguous split
/// of the sorted values and iteration continues from that split's means
/// whenever it is strictly better.
pub fn kmeans_binary(volumes: &BTreeMap<u32, f64>) -> Result<AreaPartition> {
    if volumes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 areas to classify, got {}",
            volumes.len()
        )));
    }
    let values: Vec<(u32, f64)> = volumes.iter().map(|(&id, &v)| (id, v)).collect();
    if values.iter().any(|&(_, v)| !v.is_finite()) {
        return Err(Error::InvalidInput("traffic volumes must be finite".into()));
    }
    let min = values.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
    let max = values.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(Error::InvalidInput(
            "all areas have identical traffic volume; no significant group exists".into(),
        ));
    }

    let (mut assign, mut centroids, mut iterations) = lloyd(&values, [min, max]);
    let lloyd_obj = sse(&values, &assign, centroids);

    let (split_obj, split_centroids) = best_contiguous_split(&values);
    if split_obj < lloyd_obj - 1e-9 * lloyd_obj.max(1.0) {
        let (a, c, extra) = lloyd(&values, split_centroids);
        assign = a;
        centroids = c;
        iterations += extra;
    }

    let mut significant = BTreeSet::new();
    let mut insignificant = BTreeSet::new();
    for (i, &(id, _)) in values.iter().enumerate() {
        if assign[i] {
            significant.insert(id);
        } else {
            insignificant.insert(id);
        }
    }
    Ok(AreaPartition { significant, insignificant, centroids, iterations })
}

/// Lloyd iterations from the given centroids; `assign[i]` is true for the
/// significant (high) group. Returns the fixed assignment, the final
/// centroids and the number of assignment steps taken.
fn lloyd(values: &[(u32, f64)], init: [f64; 2]) -> (Vec<bool>, [f64; 2], usize) {
    let mut centroids = init;
    let mut assign = assignment(values, centroids);
    let mut iterations = 1;
    loop {
        centroids = means(values, &assign, centroids);
        let next = assignment(values, centroids);
        iterations += 1;
        if next == assign {
            return (assign, centroids, iterations);
        }
        assign = next;
    }
}

fn assignment(values: &[(u32, f64)], centroids: [f64; 2]) -> Vec<bool> {
    values
        .iter()
        .map(|&(_, v)| (v - centroids[1]).abs() <= (v - centroids[0]).abs())
        .collect()
}

fn means(values: &[(u32, f64)], assign: &[bool], previous: [f64; 2]) -> [f64; 2] {
    let mut sum = [0.0f64; 2];
    let mut count = [0usize; 2];
    for (i, &(_, v)) in values.iter().enumerate() {
        let g = assign[i] as usize;
        sum[g] += v;
        count[g] += 1;
    }
    [
        if count[0] > 0 { sum[0] / count[0] as f64 } else { previous[0] },
        if count[1] > 0 { sum[1] / count[1] as f64 } else { previous[1] },
    ]
}

fn sse(values: &[(u32, f64)], assign: &[bool], centroids: [f64; 2]) -> f64 {
    values
        .iter()
        .enumerate()
        .map(|(i, &(_, v))| {
            let c = centroids[assign[i] as usize];
            (v - c) * (v - c)
        })
        .sum()
}

/// Optimal two-group objective over contiguous splits of the sorted values,
/// which contains the one-dimensional two-means optimum. O(n log n) via
/// prefix sums.
fn best_contiguous_split(values: &[(u32, f64)]) -> (f64, [f64; 2]) {
    let mut sorted: Vec<f64> = values.iter().map(|&(_, v)| v).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
        prefix_sq[i + 1] = prefix_sq[i] + v * v;
    }
    let group_sse = |a: usize, b: usize| {
        // SSE of sorted[a..b] around its mean.
        let len = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        (prefix_sq[b] - prefix_sq[a]) - s * s / len
    };
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for k in 1..n {
        let obj = group_sse(0, k) + group_sse(k, n);
        if obj < best.0 {
            let lo = (prefix[k] - prefix[0]) / k as f64;
            let hi = (prefix[n] - prefix[k]) / (n - k) as f64;
            best = (obj, [lo, hi]);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn volumes(pairs: &[(u32, f64)]) -> BTreeMap<u32, f64> {
        pairs.iter().copied().collect()
    }

    /// Independent oracle: enumerate every contiguous split of the sorted
    /// values and score it with direct loops.
    fn oracle_best_split(vals: &[f64]) -> f64 {
        let mut sorted = vals.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut best = f64::INFINITY;
        for k in 1..sorted.len() {
            let (lo, hi) = sorted.split_at(k);
            let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
            let obj = lo.iter().map(|v| (v - m0) * (v - m0)).sum::<f64>()
                + hi.iter().map(|v| (v - m1) * (v - m1)).sum::<f64>();
            best = best.min(obj);
        }
        best
    }

    fn partition_sse(vols: &BTreeMap<u32, f64>, part: &AreaPartition) -> f64 {
        vols.iter()
            .map(|(id, &v)| {
                let c = part.centroids[part.is_significant(*id) as usize];
                (v - c) * (v - c)
            })
            .sum()
    }

    #[test]
    fn total_aadf_divides_by_full_year() {
        let recs = vec![
            TrafficRecord { area_id: 1, year: 2024, day_of_year: 1, aadf_count: 100.0 },
            TrafficRecord { area_id: 1, year: 2024, day_of_year: 2, aadf_count: 265.0 },
            TrafficRecord { area_id: 2, year: 2024, day_of_year: 1, aadf_count: 730.0 },
        ];
        let totals = total_aadf(&recs);
        assert_eq!(totals[&1], 1.0); // (100 + 265) / 365
        assert_eq!(totals[&2], 2.0);
    }

    #[test]
    fn splits_clear_bimodal_volumes() {
        let vols = volumes(&[(10, 1.0), (11, 2.0), (12, 100.0), (13, 101.0)]);
        let part = kmeans_binary(&vols).unwrap();
        assert_eq!(part.significant, [12, 13].into_iter().collect());
        assert_eq!(part.insignificant, [10, 11].into_iter().collect());
        assert_eq!(part.centroids, [1.5, 100.5]);
        assert!((partition_sse(&vols, &part) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_points_split_one_each() {
        let part = kmeans_binary(&volumes(&[(7, 0.0), (9, 10.0)])).unwrap();
        assert_eq!(part.significant, [9].into_iter().collect());
        assert_eq!(part.centroids, [0.0, 10.0]);
    }

    #[test]
    fn escapes_suboptimal_lloyd_fixed_point() {
        // Min/max-initialized Lloyd alone settles on {0,1,9} | {10,20}
        // (objective 98.67); the optimum is {0,1} | {9,10,20} at 74.5.
        let vols = volumes(&[(0, 0.0), (1, 1.0), (2, 9.0), (3, 10.0), (4, 20.0)]);
        let part = kmeans_binary(&vols).unwrap();
        assert_eq!(part.significant, [2, 3, 4].into_iter().collect());
        assert!((part.centroids[0] - 0.5).abs() < 1e-12);
        assert!((part.centroids[1] - 13.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(kmeans_binary(&volumes(&[(1, 5.0)])).is_err());
        assert!(kmeans_binary(&volumes(&[(1, 5.0), (2, 5.0), (3, 5.0)])).is_err());
    }

    proptest! {
        #[test]
        fn matches_threshold_split_oracle(
            raw in proptest::collection::vec(0.0f64..1000.0, 2..=12),
            scale in 0.01f64..100.0,
        ) {
            let vals: Vec<f64> = raw.iter().map(|v| v * scale).collect();
            let distinct = vals.iter().map(|v| v.to_bits()).collect::<std::collections::BTreeSet<_>>();
            prop_assume!(distinct.len() >= 2);
            let vols: BTreeMap<u32, f64> =
                vals.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect();
            let part = kmeans_binary(&vols).unwrap();
            let got = partition_sse(&vols, &part);
            let want = oracle_best_split(&vals);
            prop_assert!(got <= want + 1e-9 * want.max(1.0),
                "partition SSE {got} exceeds oracle optimum {want}");
            // both groups non-empty and every area assigned exactly once
            prop_assert!(!part.significant.is_empty() && !part.insignificant.is_empty());
            prop_assert_eq!(part.significant.len() + part.insignificant.len(), vals.len());
            prop_assert!(part.significant.iter().all(|id| !part.insignificant.contains(id)));
            // significant group sits above the insignificant one
            let max_lo = part.insignificant.iter().map(|id| vols[id]).fold(f64::NEG_INFINITY, f64::max);
            let min_hi = part.significant.iter().map(|id| vols[id]).fold(f64::INFINITY, f64::min);
            prop_assert!(min_hi >= max_lo);
        }
    }
}
