//! Paired significance testing: Wilcoxon signed-rank with exact small-sample
//! p-values, plus Bonferroni correction.
//!
//! Zero differences are dropped (Wilcoxon's original treatment) and the count
//! that survives is reported as `n_effective`. Ties in |difference| receive
//! mid-ranks; ranks are kept as integers scaled by 2 so the exact enumeration
//! never touches floating-point rounding. For n_effective <= 20 the two-sided
//! p-value enumerates all 2^n sign assignments (Gray-code order, one rank-sum
//! update per step); larger samples use the normal approximation with
//! tie-corrected variance and a continuity correction.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("all differences are zero; the test is degenerate (p = 1)")]
    Degenerate,
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("paired keys mismatch: {0}")]
    KeyMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Exact,
    NormalApproximation,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Exact => "exact",
            Method::NormalApproximation => "normal_approximation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    /// min(W+, W-), the smaller signed rank sum.
    pub w: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub method: Method,
    /// Differences remaining after zero removal.
    pub n_effective: usize,
}

const EXACT_LIMIT: usize = 20;

/// Mid-ranks of |diffs|, scaled by 2 so ties stay integral, plus the sizes of
/// the tie groups (needed for the variance correction).
fn scaled_ranks(diffs: &[f64]) -> (Vec<u64>, Vec<u64>) {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut scaled = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // Positions start+1 ..= end hold the same |d|; mid-rank doubled is
        // first_rank + last_rank, an integer even when the mean is x.5.
        let doubled = (start + 1 + end) as u64;
        for &idx in &order[start..end] {
            scaled[idx] = doubled;
        }
        tie_sizes.push((end - start) as u64);
        start = end;
    }
    (scaled, tie_sizes)
}

fn exact_p(scaled: &[u64], w_obs: u64) -> f64 {
    let n = scaled.len();
    let total: u64 = scaled.iter().sum();
    let hits = |w_plus: u64| w_plus <= w_obs || w_plus >= total - w_obs;
    let mut w_plus = 0u64;
    let mut count = 0u64;
    if hits(w_plus) {
        count += 1;
    }
    let mut in_plus = vec![false; n];
    for i in 1u64..(1u64 << n) {
        let bit = i.trailing_zeros() as usize;
        if in_plus[bit] {
            w_plus -= scaled[bit];
        } else {
            w_plus += scaled[bit];
        }
        in_plus[bit] = !in_plus[bit];
        if hits(w_plus) {
            count += 1;
        }
    }
    count as f64 / (1u64 << n) as f64
}

fn normal_p(n: usize, tie_sizes: &[u64], w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let sd = var.sqrt();
    // W <= mean by construction; the +0.5 continuity correction pulls the
    // statistic toward the mean.
    let z = (w - mean + 0.5) / sd;
    (libm::erfc(-z / std::f64::consts::SQRT_2)).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test on paired differences.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<TestResult, StatsError> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(StatsError::Param("differences must be finite".into()));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(StatsError::Degenerate);
    }
    let n = nonzero.len();
    let (scaled, tie_sizes) = scaled_ranks(&nonzero);
    let signs: Vec<bool> = nonzero.iter().map(|&d| d > 0.0).collect();
    let w_plus: u64 = scaled
        .iter()
        .zip(&signs)
        .filter(|&(_, &pos)| pos)
        .map(|(&r, _)| r)
        .sum();
    let total: u64 = scaled.iter().sum();
    let w_scaled = w_plus.min(total - w_plus);
    let w = w_scaled as f64 / 2.0;
    let (p_value, method) = if n <= EXACT_LIMIT {
        (exact_p(&scaled, w_scaled), Method::Exact)
    } else {
        (normal_p(n, &tie_sizes, w), Method::NormalApproximation)
    };
    Ok(TestResult {
        w,
        p_value,
        method,
        n_effective: n,
    })
}

/// Per-test significance decisions under the Bonferroni-adjusted threshold
/// alpha/m, plus the threshold itself. Decision is p < threshold.
pub fn bonferroni(p_values: &[f64], alpha: f64, m: usize) -> Result<(Vec<bool>, f64), StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Param(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if m == 0 {
        return Err(StatsError::Param("comparison count m must be >= 1".into()));
    }
    let threshold = alpha / m as f64;
    Ok((p_values.iter().map(|&p| p < threshold).collect(), threshold))
}

/// F1 scores of one configuration keyed by (subject, repeat).
pub type KeyedScores = Vec<((u16, usize), f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    pub labels: (String, String),
    pub keys: Vec<(u16, usize)>,
    /// score(B) - score(A) per key, in ascending key order.
    pub diffs: Vec<f64>,
}

/// Aligns two score lists by their (subject, repeat) keys.
pub fn compare_configs(
    label_a: &str,
    scores_a: &KeyedScores,
    label_b: &str,
    scores_b: &KeyedScores,
) -> Result<PairedScores, StatsError> {
    let map_of = |scores: &KeyedScores, label: &str| {
        let mut map = BTreeMap::new();
        for &(key, score) in scores {
            if map.insert(key, score).is_some() {
                return Err(StatsError::KeyMismatch(format!(
                    "{label} repeats key (subject {}, repeat {})",
                    key.0, key.1
                )));
            }
        }
        Ok(map)
    };
    let a = map_of(scores_a, label_a)?;
    let b = map_of(scores_b, label_b)?;
    if a.len() != b.len() || a.keys().ne(b.keys()) {
        return Err(StatsError::KeyMismatch(format!(
            "{label_a} has {} keys, {label_b} has {}; key sets must be identical",
            a.len(),
            b.len()
        )));
    }
    let keys: Vec<(u16, usize)> = a.keys().copied().collect();
    let diffs = keys.iter().map(|k| b[k] - a[k]).collect();
    Ok(PairedScores {
        labels: (label_a.to_string(), label_b.to_string()),
        keys,
        diffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent route: f64 mid-ranks, every sign mask visited naively.
    fn brute_force_p(diffs: &[f64]) -> f64 {
        let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
        let n = nonzero.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| nonzero[a].abs().partial_cmp(&nonzero[b].abs()).unwrap());
        let mut ranks = vec![0.0f64; n];
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && nonzero[order[end]].abs() == nonzero[order[start]].abs() {
                end += 1;
            }
            let mid = (start + 1 + end) as f64 / 2.0;
            for &idx in &order[start..end] {
                ranks[idx] = mid;
            }
            start = end;
        }
        let total: f64 = ranks.iter().sum();
        let w_plus_obs: f64 = ranks
            .iter()
            .zip(&nonzero)
            .filter(|&(_, &d)| d > 0.0)
            .map(|(&r, _)| r)
            .sum();
        let w_obs = w_plus_obs.min(total - w_plus_obs);
        let mut count = 0u64;
        for mask in 0u64..(1u64 << n) {
            let w_plus: f64 = (0..n)
                .filter(|&i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if w_plus.min(total - w_plus) <= w_obs {
                count += 1;
            }
        }
        count as f64 / (1u64 << n) as f64
    }

    #[test]
    fn five_distinct_positive_diffs() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(r.w, 0.0);
        assert_eq!(r.p_value, 0.0625);
        assert_eq!(r.method, Method::Exact);
        assert_eq!(r.n_effective, 5);
    }

    #[test]
    fn single_nonzero_diff_cannot_be_extreme() {
        let r = wilcoxon_signed_rank(&[0.7]).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.n_effective, 1);
    }

    #[test]
    fn zeros_are_dropped_and_all_zero_is_degenerate() {
        let r = wilcoxon_signed_rank(&[0.0, 0.0, 1.5, -2.5]).unwrap();
        assert_eq!(r.n_effective, 2);
        assert!(matches!(
            wilcoxon_signed_rank(&[0.0, 0.0, 0.0]),
            Err(StatsError::Degenerate)
        ));
        assert!(matches!(
            wilcoxon_signed_rank(&[]),
            Err(StatsError::Degenerate)
        ));
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0, f64::NAN]),
            Err(StatsError::Param(_))
        ));
    }

    #[test]
    fn matches_brute_force_on_ties_and_mixed_signs() {
        let cases: [&[f64]; 6] = [
            &[1.0, -1.0, 2.0],
            &[3.0, 3.0, -3.0, 1.0],
            &[0.5, -0.5, 0.5, -0.5, 2.0],
            &[10.0, -4.0, 4.0, -10.0, 7.0, 1.0],
            &[1.0, 2.0, 2.0, 2.0, -5.0, 6.0, -6.0],
            &[-1.0, -2.0, -3.0],
        ];
        for diffs in cases {
            let r = wilcoxon_signed_rank(diffs).unwrap();
            assert_eq!(r.p_value, brute_force_p(diffs), "diffs {diffs:?}");
        }
    }

    #[test]
    fn large_samples_use_normal_approximation() {
        let diffs: Vec<f64> = (1..=25).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&diffs).unwrap();
        assert_eq!(r.method, Method::NormalApproximation);
        assert_eq!(r.w, 0.0);
        assert_eq!(r.n_effective, 25);
        assert!(r.p_value > 0.9e-5 && r.p_value < 1.7e-5, "p {}", r.p_value);
        let n20: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert_eq!(wilcoxon_signed_rank(&n20).unwrap().method, Method::Exact);
    }

    #[test]
    fn paper_p_values_reproduce_decisions() {
        let (decisions, threshold) = bonferroni(&[0.0039, 0.00195, 0.0264], 0.05, 3).unwrap();
        assert!((threshold - 0.05 / 3.0).abs() < 1e-15);
        assert!((threshold - 0.0167).abs() < 1e-4);
        assert_eq!(decisions, vec![true, true, false]);
    }

    #[test]
    fn bonferroni_edge_cases() {
        let (d, t) = bonferroni(&[0.04], 0.05, 1).unwrap();
        assert_eq!(t, 0.05);
        assert_eq!(d, vec![true]);
        let (d, _) = bonferroni(&[], 0.05, 3).unwrap();
        assert!(d.is_empty());
        assert!(matches!(
            bonferroni(&[0.01], 0.0, 3),
            Err(StatsError::Param(_))
        ));
        assert!(matches!(
            bonferroni(&[0.01], 1.0, 3),
            Err(StatsError::Param(_))
        ));
        assert!(matches!(
            bonferroni(&[0.01], 0.05, 0),
            Err(StatsError::Param(_))
        ));
    }

    #[test]
    fn compare_aligns_and_rejects_mismatches() {
        let a: KeyedScores = vec![((1, 0), 0.8), ((1, 1), 0.9), ((2, 0), 0.7)];
        let same = compare_configs("WO", &a, "WO", &a.clone()).unwrap();
        assert_eq!(same.diffs, vec![0.0, 0.0, 0.0]);
        assert_eq!(same.keys, vec![(1, 0), (1, 1), (2, 0)]);

        let mut b = a.clone();
        b[2].1 = 0.75;
        let paired = compare_configs("WO", &a, "WA", &b).unwrap();
        assert_eq!(paired.labels, ("WO".to_string(), "WA".to_string()));
        assert!((paired.diffs[2] - 0.05).abs() < 1e-15);

        let disjoint: KeyedScores = vec![((9, 0), 0.5)];
        assert!(matches!(
            compare_configs("WO", &a, "WA", &disjoint),
            Err(StatsError::KeyMismatch(_))
        ));
        let dupes: KeyedScores = vec![((1, 0), 0.5), ((1, 0), 0.6), ((2, 0), 0.4)];
        assert!(matches!(
            compare_configs("WO", &dupes, "WA", &a),
            Err(StatsError::KeyMismatch(_))
        ));
    }

    #[test]
    fn eighteen_keys_in_eighteen_diffs_out() {
        let mk = |base: f64| -> KeyedScores {
            (1u16..=9)
                .flat_map(|s| (0usize..2).map(move |r| ((s, r), base + s as f64 / 100.0)))
                .collect()
        };
        let paired = compare_configs("WO", &mk(0.80), "W18", &mk(0.85)).unwrap();
        assert_eq!(paired.diffs.len(), 18);
        assert!(paired.diffs.iter().all(|d| (d - 0.05).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn exact_matches_brute_force(diffs in prop::collection::vec(-4i8..=4, 2..10)) {
            let diffs: Vec<f64> = diffs.into_iter().map(f64::from).collect();
            if diffs.iter().all(|&d| d == 0.0) {
                prop_assert!(matches!(wilcoxon_signed_rank(&diffs), Err(StatsError::Degenerate)));
            } else {
                let r = wilcoxon_signed_rank(&diffs).unwrap();
                prop_assert_eq!(r.p_value, brute_force_p(&diffs));
                prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
            }
        }

        #[test]
        fn negation_symmetry(diffs in prop::collection::vec(-50i16..=50, 1..16)) {
            prop_assume!(diffs.iter().any(|&d| d != 0));
            let pos: Vec<f64> = diffs.iter().map(|&d| f64::from(d)).collect();
            let neg: Vec<f64> = pos.iter().map(|d| -d).collect();
            let rp = wilcoxon_signed_rank(&pos).unwrap();
            let rn = wilcoxon_signed_rank(&neg).unwrap();
            prop_assert_eq!(rp.p_value, rn.p_value);
            prop_assert_eq!(rp.w, rn.w);
        }

        #[test]
        fn rank_sums_conserve_without_ties(n in 1usize..12, seed in 0u64..1000) {
            // Distinct magnitudes by construction: |d| = 1..n with random signs.
            let mut diffs: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            for (i, d) in diffs.iter_mut().enumerate() {
                if (seed >> (i % 10)) & 1 == 1 {
                    *d = -*d;
                }
            }
            let (scaled, ties) = scaled_ranks(&diffs);
            let total: u64 = scaled.iter().sum();
            prop_assert_eq!(total, (n * (n + 1)) as u64);
            prop_assert!(ties.iter().all(|&t| t == 1));
        }

        #[test]
        fn bonferroni_is_monotone_in_m(p in 0.0f64..1.0, m1 in 1usize..10, extra in 0usize..10) {
            let m2 = m1 + extra;
            let (d1, _) = bonferroni(&[p], 0.05, m1).unwrap();
            let (d2, _) = bonferroni(&[p], 0.05, m2).unwrap();
            prop_assert!(!(d2[0] && !d1[0]));
        }
    }
}
