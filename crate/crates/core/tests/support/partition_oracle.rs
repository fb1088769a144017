//! Exhaustive contiguous 3-partition oracle for 1-D binning.

#![allow(dead_code)]

use std::collections::HashMap;

use crimemap_core::labeling::{jenks_bins, kmeans_bins, WeightedValues};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum within-class sum of squares over every split of the sorted distinct
/// values into three non-empty contiguous runs. Sums are taken from scratch per class.
pub fn exhaustive_min(scores: &[u64]) -> f64 {
    let mut distinct: Vec<u64> = scores.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let mut counts: HashMap<u64, f64> = HashMap::new();
    for &s in scores {
        *counts.entry(s).or_default() += 1.0;
    }
    let weight = |v: u64| counts[&v];
    let class_ss = |vals: &[u64]| -> f64 {
        let w: f64 = vals.iter().map(|&v| weight(v)).sum();
        let mean = vals.iter().map(|&v| v as f64 * weight(v)).sum::<f64>() / w;
        vals.iter()
            .map(|&v| weight(v) * (v as f64 - mean).powi(2))
            .sum()
    };
    let n = distinct.len();
    let mut best = f64::INFINITY;
    for a in 1..n - 1 {
        for b in a + 1..n {
            let total = class_ss(&distinct[..a]) + class_ss(&distinct[a..b]) + class_ss(&distinct[b..]);
            best = best.min(total);
        }
    }
    best
}

pub fn fuzz_case(rng: &mut ChaCha8Rng) -> Vec<u64> {
    let spread = *[10u64, 100, 1000, 100_000].get(rng.random_range(0..4)).unwrap();
    let k = rng.random_range(3..=12).min(spread as usize + 1);
    let mut values: Vec<u64> = Vec::new();
    while values.len() < k {
        let v = rng.random_range(0..=spread);
        if !values.contains(&v) {
            values.push(v);
        }
    }
    let mut scores = Vec::new();
    for v in values {
        let w = if rng.random_bool(0.3) {
            rng.random_range(1..=500)
        } else {
            rng.random_range(1..=20)
        };
        scores.extend(std::iter::repeat_n(v, w));
    }
    scores
}

pub fn rel_gap(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        (got - want).abs() / want.abs()
    }
}

/// Runs both binners on `cases` fuzzed multisets and returns the worst relative
/// objective gap to the oracle for k-means and Jenks, or the first failing case.
pub fn worst_gaps(seed: u64, cases: u64, tolerance: f64) -> Result<(f64, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0f64, 0f64);
    for case in 0..cases {
        let scores = fuzz_case(&mut rng);
        let data = WeightedValues::from_scores(&scores);
        let want = exhaustive_min(&scores);
        let km = kmeans_bins(&scores, case).map_err(|e| e.to_string())?.objective(&data);
        let jk = jenks_bins(&scores).map_err(|e| e.to_string())?.objective(&data);
        worst.0 = worst.0.max(rel_gap(km, want));
        worst.1 = worst.1.max(rel_gap(jk, want));
        if rel_gap(km, want) > tolerance {
            return Err(format!("k-means case {case}: {km} vs {want} on {data:?}"));
        }
        if rel_gap(jk, want) > tolerance {
            return Err(format!("jenks case {case}: {jk} vs {want} on {data:?}"));
        }
    }
    Ok(worst)
}
